import type { Role } from "./types.js";

// Fixed role color scheme: user commands blue, task-manager allocations
// orange, robot-detected events green, robot reports neutral.
export const ROLE_COLORS: Record<Role, string> = {
  user: "#1f6feb",
  task_manager: "#e8822a",
  event: "#2da44e",
  robot: "#6e7781",
};

export function colorFor(role: Role): string {
  return ROLE_COLORS[role];
}
