// Wire types mirroring docs/gateway_frames.md.

export type Role = "user" | "task_manager" | "event" | "robot";

export interface ChatEntry {
  seq: number;
  role: Role;
  text: string;
  tick: number;
}

export interface RobotRow {
  id: string;
  posture: string;
  position: [number, number];
  busy: boolean;
  instruction: string;
  status: string;
}

export interface TaskRecord {
  record_id: string;
  owner: string;
  status: "completed" | "in_progress" | "interrupted";
  assignment: { step_id: string; assignee: string; instruction: string };
  history: [string, number][];
}

export interface WorldEntity {
  position: [number, number];
  posture: string;
  attached_to: string | null;
}

export interface WorldSnapshot {
  tick: number;
  entities: Record<string, WorldEntity>;
}

export interface GoalPredicate {
  kind: string;
  entity?: string;
  position?: [number, number];
  tolerance?: number;
  parent?: string;
  posture?: string;
}

export interface Snapshot {
  tick: number;
  chat: ChatEntry[];
  tasks: TaskRecord[];
  robots: RobotRow[];
  world: WorldSnapshot;
  goals?: GoalPredicate[];
  finished: boolean;
}

export interface Frame {
  type: "hello" | "chat" | "task" | "robot" | "world" | "ack" | "error";
  payload: unknown;
  tick: number;
  ts: number;
}
