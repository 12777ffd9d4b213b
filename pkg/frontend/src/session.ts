import { StatusStore } from "./status.js";
import { TimelineStore } from "./timeline.js";
import type {
  ChatEntry,
  Frame,
  GoalPredicate,
  RobotRow,
  Snapshot,
  TaskRecord,
  WorldSnapshot,
} from "./types.js";

export interface StreamHandle {
  send(data: unknown): void;
  close(): void;
}

export interface StreamCallbacks {
  onFrame(frame: Frame): void;
  onClose(): void;
}

/** Injected so tests can drive the session from recorded fixtures. */
export interface Transport {
  fetchSnapshot(): Promise<Snapshot>;
  openStream(callbacks: StreamCallbacks): StreamHandle;
}

export type ConnectionState = "connecting" | "live" | "retrying" | "closed";

export interface PendingSend {
  text: string;
  state: "sending" | "delivered" | "unsent";
}

const BACKOFF_BASE_MS = 500;
const BACKOFF_CAP_MS = 8000;

/**
 * Live view of one run: snapshot first, then the stream applied on top.
 * Reconnects resume from a fresh snapshot, so the timeline never loses,
 * duplicates, or reorders entries. The single write path is sendInput().
 */
export class LiveSession {
  readonly timeline = new TimelineStore();
  readonly status = new StatusStore();
  world: WorldSnapshot | null = null;
  goals: GoalPredicate[] = [];
  latestTick = 0;
  worldTick = 0;
  state: ConnectionState = "closed";
  sends: PendingSend[] = [];
  errors: string[] = [];
  onChange: () => void = () => {};

  private stream: StreamHandle | null = null;
  private attempt = 0;
  private stopped = false;

  constructor(
    private transport: Transport,
    private delay: (ms: number) => Promise<void> = (ms) =>
      new Promise((resolve) => setTimeout(resolve, ms)),
    readonly staleAfterTicks = 25,
  ) {}

  async connect(): Promise<void> {
    this.stopped = false;
    this.state = "connecting";
    this.onChange();
    try {
      const snapshot = await this.transport.fetchSnapshot();
      this.applySnapshot(snapshot);
    } catch {
      await this.scheduleRetry();
      return;
    }
    this.stream = this.transport.openStream({
      onFrame: (frame) => this.applyFrame(frame),
      onClose: () => {
        this.stream = null;
        if (!this.stopped) void this.scheduleRetry();
      },
    });
    this.state = "live";
    this.attempt = 0;
    this.onChange();
  }

  private async scheduleRetry(): Promise<void> {
    this.state = "retrying";
    this.onChange();
    const wait = Math.min(BACKOFF_BASE_MS * 2 ** this.attempt, BACKOFF_CAP_MS);
    this.attempt += 1;
    await this.delay(wait);
    if (!this.stopped) await this.connect();
  }

  close(): void {
    this.stopped = true;
    this.state = "closed";
    this.stream?.close();
    this.stream = null;
    this.onChange();
  }

  applySnapshot(snapshot: Snapshot): void {
    this.timeline.seed(snapshot.chat);
    this.status.seed(snapshot.robots, snapshot.tasks);
    this.world = snapshot.world;
    this.worldTick = snapshot.world.tick;
    this.latestTick = snapshot.tick;
    if (snapshot.goals) this.goals = snapshot.goals;
    this.onChange();
  }

  applyFrame(frame: Frame): void {
    this.latestTick = Math.max(this.latestTick, frame.tick);
    switch (frame.type) {
      case "chat":
        this.timeline.apply(frame.payload as ChatEntry);
        break;
      case "robot":
        this.status.applyRobot(frame.payload as RobotRow);
        break;
      case "task":
        this.status.applyTask(frame.payload as TaskRecord);
        break;
      case "world":
        this.world = frame.payload as WorldSnapshot;
        this.worldTick = this.world.tick;
        break;
      case "ack": {
        const pending = this.sends.find((s) => s.state === "sending");
        if (pending) pending.state = "delivered";
        break;
      }
      case "error":
        this.errors.push(String((frame.payload as { detail?: string }).detail ?? "error"));
        break;
      case "hello":
        break;
    }
    this.onChange();
  }

  worldIsStale(): boolean {
    return this.world !== null && this.latestTick - this.worldTick > this.staleAfterTicks;
  }

  /** The only write path into the system. Empty input is blocked here. */
  sendInput(text: string): PendingSend | null {
    const trimmed = text.trim();
    if (!trimmed) return null;
    const pending: PendingSend = { text: trimmed, state: "sending" };
    this.sends.push(pending);
    if (this.stream === null || this.state !== "live") {
      pending.state = "unsent";
      this.onChange();
      return pending;
    }
    try {
      this.stream.send({ type: "human_input", payload: { text: trimmed } });
    } catch {
      pending.state = "unsent";
    }
    this.onChange();
    return pending;
  }

  retrySend(pending: PendingSend): void {
    if (pending.state !== "unsent") return;
    pending.state = "sending";
    if (this.stream === null || this.state !== "live") {
      pending.state = "unsent";
      this.onChange();
      return;
    }
    try {
      this.stream.send({ type: "human_input", payload: { text: pending.text } });
    } catch {
      pending.state = "unsent";
    }
    this.onChange();
  }
}
