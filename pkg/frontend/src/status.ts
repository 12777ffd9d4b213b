import type { RobotRow, TaskRecord } from "./types.js";

export interface StatusPanelRow {
  id: string;
  posture: string;
  position: [number, number];
  instruction: string;
  badge: "completed" | "in_progress" | "interrupted" | "";
}

/** One row per robot: live pose plus the robot's current task badge. */
export class StatusStore {
  private robots = new Map<string, RobotRow>();
  private tasks = new Map<string, TaskRecord>();

  applyRobot(row: RobotRow): void {
    this.robots.set(row.id, row);
  }

  applyTask(record: TaskRecord): void {
    this.tasks.set(record.record_id, record);
  }

  seed(robots: RobotRow[], tasks: TaskRecord[]): void {
    this.robots.clear();
    this.tasks.clear();
    for (const row of robots) this.applyRobot(row);
    for (const record of tasks) this.applyTask(record);
  }

  taskRecords(): TaskRecord[] {
    return [...this.tasks.values()].sort((a, b) =>
      a.record_id.localeCompare(b.record_id),
    );
  }

  private badgeFor(robotId: string): StatusPanelRow["badge"] {
    let latest: TaskRecord | undefined;
    for (const record of this.tasks.values()) {
      if (record.owner !== robotId) continue;
      if (record.status === "in_progress") return "in_progress";
      if (!latest || record.record_id > latest.record_id) latest = record;
    }
    return latest ? latest.status : "";
  }

  rows(): StatusPanelRow[] {
    return [...this.robots.values()]
      .sort((a, b) => a.id.localeCompare(b.id))
      .map((row) => ({
        id: row.id,
        posture: row.posture,
        position: row.position,
        instruction: row.instruction,
        badge: this.badgeFor(row.id),
      }));
  }
}
