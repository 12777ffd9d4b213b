import type { GoalPredicate, WorldSnapshot } from "./types.js";

// Top-down observational renderer; the view never writes anything back.

const ROBOT_COLOR = "#30505f";
const OBJECT_COLOR = "#9a6700";
const GOAL_COLOR = "#2da44e";
const GRID = "#e4e7eb";

export class WorldView {
  private ctx: CanvasRenderingContext2D;
  private scale = 40;

  constructor(private canvas: HTMLCanvasElement, private robotIds: Set<string>) {
    const ctx = canvas.getContext("2d");
    if (!ctx) throw new Error("canvas 2d context unavailable");
    this.ctx = ctx;
  }

  setRobots(ids: string[]): void {
    this.robotIds = new Set(ids);
  }

  private fit(world: WorldSnapshot, goals: GoalPredicate[]): void {
    let minX = -1, maxX = 1, minY = -1, maxY = 1;
    const extend = (x: number, y: number) => {
      minX = Math.min(minX, x - 1);
      maxX = Math.max(maxX, x + 1);
      minY = Math.min(minY, y - 1);
      maxY = Math.max(maxY, y + 1);
    };
    for (const entity of Object.values(world.entities)) {
      extend(entity.position[0], entity.position[1]);
    }
    for (const goal of goals) {
      if (goal.position) extend(goal.position[0], goal.position[1]);
    }
    const sx = this.canvas.width / (maxX - minX);
    const sy = this.canvas.height / (maxY - minY);
    this.scale = Math.min(sx, sy);
    this.origin = [minX, maxY];
  }

  private origin: [number, number] = [0, 0];

  private px(x: number, y: number): [number, number] {
    return [(x - this.origin[0]) * this.scale, (this.origin[1] - y) * this.scale];
  }

  render(world: WorldSnapshot | null, goals: GoalPredicate[], stale: boolean): void {
    const { ctx, canvas } = this;
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    if (!world) {
      this.grid();
      return;
    }
    this.fit(world, goals);
    this.grid();

    for (const goal of goals) {
      if (!goal.position) continue;
      const [gx, gy] = this.px(goal.position[0], goal.position[1]);
      const r = (goal.tolerance ?? 0.3) * this.scale;
      ctx.strokeStyle = GOAL_COLOR;
      ctx.setLineDash([4, 3]);
      ctx.beginPath();
      ctx.arc(gx, gy, Math.max(r, 6), 0, Math.PI * 2);
      ctx.stroke();
      ctx.setLineDash([]);
    }

    const ids = Object.keys(world.entities).sort();
    for (const id of ids) {
      const entity = world.entities[id];
      const attached = entity.attached_to !== null;
      // attached objects ride their parent: draw lifted and slightly offset
      const [ex, ey] = this.px(
        entity.position[0] + (attached ? 0.18 : 0),
        entity.position[1] + (attached ? 0.18 : 0),
      );
      if (this.robotIds.has(id)) {
        ctx.fillStyle = ROBOT_COLOR;
        ctx.beginPath();
        ctx.arc(ex, ey, 9, 0, Math.PI * 2);
        ctx.fill();
        if (entity.posture === "sitting") {
          ctx.strokeStyle = "#fff";
          ctx.beginPath();
          ctx.arc(ex, ey, 4, 0, Math.PI * 2);
          ctx.stroke();
        }
      } else {
        ctx.fillStyle = OBJECT_COLOR;
        ctx.fillRect(ex - 6, ey - 6, 12, 12);
      }
      ctx.fillStyle = "#333";
      ctx.font = "10px system-ui";
      ctx.fillText(id, ex + 10, ey + 3);
    }

    ctx.fillStyle = "#555";
    ctx.font = "11px system-ui";
    ctx.fillText(`tick ${world.tick}`, 6, 14);
    if (stale) {
      ctx.fillStyle = "#d1242f";
      ctx.fillText("world view stale", 6, 28);
    }
  }

  private grid(): void {
    const { ctx, canvas } = this;
    ctx.strokeStyle = GRID;
    ctx.lineWidth = 1;
    for (let x = 0; x < canvas.width; x += this.scale) {
      ctx.beginPath();
      ctx.moveTo(x, 0);
      ctx.lineTo(x, canvas.height);
      ctx.stroke();
    }
    for (let y = 0; y < canvas.height; y += this.scale) {
      ctx.beginPath();
      ctx.moveTo(0, y);
      ctx.lineTo(canvas.width, y);
      ctx.stroke();
    }
  }
}
