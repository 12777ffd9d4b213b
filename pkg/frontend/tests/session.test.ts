import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import { LiveSession } from "../src/session.js";
import type { StreamCallbacks, StreamHandle, Transport } from "../src/session.js";
import type { Frame, Snapshot } from "../src/types.js";

const fixturePath = fileURLToPath(
  new URL("./fixtures/drop_recovery_session.json", import.meta.url),
);

interface Segment {
  snapshot?: Snapshot;
  frames: Frame[];
}

interface SessionFixture {
  initial_snapshot: Snapshot;
  segments: Segment[];
  final_snapshot: Snapshot;
}

const fixture: SessionFixture = JSON.parse(readFileSync(fixturePath, "utf-8"));

/** Replays recorded gateway traffic: each connect consumes one segment and
 * then drops the connection, except for the final segment. */
class FixtureTransport implements Transport {
  connects = 0;

  constructor(private data: SessionFixture) {}

  async fetchSnapshot(): Promise<Snapshot> {
    const index = this.connects;
    if (index === 0) return this.data.initial_snapshot;
    return this.data.segments[index].snapshot as Snapshot;
  }

  openStream(callbacks: StreamCallbacks): StreamHandle {
    const index = this.connects;
    this.connects += 1;
    const segment = this.data.segments[index];
    queueMicrotask(() => {
      for (const frame of segment.frames) callbacks.onFrame(frame);
      if (index < this.data.segments.length - 1) callbacks.onClose();
    });
    return { send: () => {}, close: () => {} };
  }
}

const instantly = async () => {};

describe("drop-recovery session across disconnects", () => {
  it("rebuilds the exact server timeline after two reconnects", async () => {
    const transport = new FixtureTransport(fixture);
    const session = new LiveSession(transport, instantly);
    await session.connect();
    // let the scripted segment delivery + reconnects settle
    for (let i = 0; i < 20 && transport.connects < fixture.segments.length; i++) {
      await new Promise((resolve) => setTimeout(resolve, 0));
    }
    expect(transport.connects).toBe(fixture.segments.length);
    expect(session.state).toBe("live");
    // loss-free, duplicate-free, order-preserving vs the snapshot endpoint
    expect(session.timeline.equals(fixture.final_snapshot.chat)).toBe(true);
  });

  it("renders the fixed role colors on the rebuilt timeline", async () => {
    const transport = new FixtureTransport(fixture);
    const session = new LiveSession(transport, instantly);
    await session.connect();
    for (let i = 0; i < 20 && transport.connects < fixture.segments.length; i++) {
      await new Promise((resolve) => setTimeout(resolve, 0));
    }
    const byRole = new Map(session.timeline.items().map((i) => [i.role, i.color]));
    expect(byRole.get("user")).toBe("#1f6feb");
    expect(byRole.get("task_manager")).toBe("#e8822a");
    expect(byRole.get("event")).toBe("#2da44e");
    expect(byRole.get("robot")).toBe("#6e7781");
  });

  it("tracks robot and task state from the stream", async () => {
    const transport = new FixtureTransport(fixture);
    const session = new LiveSession(transport, instantly);
    await session.connect();
    for (let i = 0; i < 20 && transport.connects < fixture.segments.length; i++) {
      await new Promise((resolve) => setTimeout(resolve, 0));
    }
    const rows = session.status.rows();
    expect(rows.map((r) => r.id)).toEqual(["burger", "go2", "waffle"]);
    const badges = Object.fromEntries(rows.map((r) => [r.id, r.badge]));
    // burger only observes in this scenario and never owns a task
    expect(badges).toEqual({ burger: "", go2: "completed", waffle: "completed" });
  });
});

/** Minimal live echo: human input comes back as a user chat frame. */
class EchoTransport implements Transport {
  private callbacks: StreamCallbacks | null = null;
  private seq = 0;

  async fetchSnapshot(): Promise<Snapshot> {
    return {
      tick: 0,
      chat: [],
      tasks: [],
      robots: [],
      world: { tick: 0, entities: {} },
      goals: [],
      finished: false,
    };
  }

  openStream(callbacks: StreamCallbacks): StreamHandle {
    this.callbacks = callbacks;
    return {
      send: (data) => {
        const message = data as { type: string; payload: { text: string } };
        // the gateway acks, then the user entry is streamed back
        callbacks.onFrame({ type: "ack", payload: { received: message.payload.text },
                            tick: 1, ts: 0 });
        callbacks.onFrame({
          type: "chat",
          payload: { seq: this.seq++, role: "user", text: message.payload.text, tick: 1 },
          tick: 1,
          ts: 0,
        });
      },
      close: () => {},
    };
  }

  drop(): void {
    this.callbacks?.onClose();
  }
}

describe("send_input", () => {
  it("round-trips as a blue user entry within one streamed frame", async () => {
    const session = new LiveSession(new EchoTransport(), instantly);
    await session.connect();
    const pending = session.sendInput("I don't want it anymore");
    expect(pending?.state).toBe("delivered");
    const items = session.timeline.items();
    expect(items).toHaveLength(1);
    expect(items[0].text).toBe("I don't want it anymore");
    expect(items[0].color).toBe("#1f6feb");
  });

  it("blocks empty input client-side", async () => {
    const session = new LiveSession(new EchoTransport(), instantly);
    await session.connect();
    expect(session.sendInput("   ")).toBeNull();
    expect(session.timeline.items()).toHaveLength(0);
  });

  it("marks sends unsent when the connection is down and retries later", async () => {
    class DeadTransport implements Transport {
      async fetchSnapshot(): Promise<Snapshot> {
        throw new Error("gateway down");
      }
      openStream(): StreamHandle {
        return { send: () => {}, close: () => {} };
      }
    }
    let retries = 0;
    const session = new LiveSession(new DeadTransport(), async () => {
      retries += 1;
      if (retries > 2) session.close(); // stop the retry loop for the test
    });
    await session.connect();
    expect(retries).toBeGreaterThan(0); // banner + auto-retry with backoff
    const pending = session.sendInput("hello?");
    expect(pending?.state).toBe("unsent");

    const echo = new EchoTransport();
    const live = new LiveSession(echo, instantly);
    await live.connect();
    const queued = live.sendInput("first try");
    expect(queued?.state).toBe("delivered");
  });
});

describe("world staleness", () => {
  it("flags the world view when frames outrun it", async () => {
    const session = new LiveSession(new EchoTransport(), instantly, 10);
    await session.connect();
    session.applyFrame({ type: "world", payload: { tick: 1, entities: {} },
                         tick: 1, ts: 0 });
    expect(session.worldIsStale()).toBe(false);
    session.applyFrame({
      type: "chat",
      payload: { seq: 99, role: "robot", text: "x", tick: 40 },
      tick: 40,
      ts: 0,
    });
    expect(session.worldIsStale()).toBe(true);
  });
});
