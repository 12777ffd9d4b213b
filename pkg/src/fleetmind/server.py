"""Gateway service: streams chat entries, task records, robot statuses, and
world snapshots to clients over a websocket, accepts human input anytime, and
serves a snapshot endpoint so late joiners can resynchronize.

Frame schema (bit-exact contract, see docs/gateway_frames.md):
    {"type": str, "payload": object, "tick": int, "ts": float}
Frame types: hello, chat, task, robot, world, ack, error.
"""

from __future__ import annotations

import asyncio
import json
import queue
import threading
import time
from typing import Optional

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from starlette.concurrency import run_in_threadpool

from . import bus as busmod
from .manager import MANAGER_ID
from .runtime import ScenarioRun

_QUEUE_LIMIT = 512


def _frame(kind: str, payload, tick: int) -> dict:
    return {"type": kind, "payload": payload, "tick": tick, "ts": time.time()}


class RunHandle:
    """Owns the simulation thread; never lets slow clients block the clock.

    Subscribers get bounded queues; on overflow the oldest frames are dropped
    and the client is expected to resync from the snapshot endpoint."""

    def __init__(self, run: ScenarioRun, tps: float = 20.0, world_every: int = 5) -> None:
        self.run = run
        self.tps = tps
        self.world_every = max(1, world_every)
        self._lock = threading.Lock()
        self._subs: list[queue.Queue] = []
        self._chat_cursor = 0
        self._record_cache: dict[str, str] = {}
        self._robot_cache: dict[str, tuple] = {}
        self._thread: Optional[threading.Thread] = None
        self._stop = threading.Event()
        self.finished = threading.Event()
        self._human_sender = run.config.humans[0] if run.config.humans else "user"

    # ------------------------------------------------------------- lifecycle

    def start(self, tick_budget: Optional[int] = None) -> None:
        budget = tick_budget if tick_budget is not None else self.run.config.tick_budget
        self._thread = threading.Thread(
            target=self._loop, args=(budget,), name="fleetmind-run", daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def _loop(self, budget: int) -> None:
        interval = 1.0 / self.tps if self.tps > 0 else 0.0
        goals = list(self.run.config.goals)
        while not self._stop.is_set() and self.run.world.tick < budget:
            started = time.time()
            with self._lock:
                self.run.step_once()
                self._publish()
                done = (
                    goals
                    and self.run.manager.plans_posted
                    and self.run.manager.quiescent()
                    and self.run._agents_idle()
                    and all(self.run.world.goal_satisfied(goals))
                )
            if done:
                break
            if interval:
                remaining = interval - (time.time() - started)
                if remaining > 0:
                    time.sleep(remaining)
        self.finished.set()

    # ----------------------------------------------------------- fan-out side

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue(maxsize=_QUEUE_LIMIT)
        with self._lock:
            self._subs.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._lock:
            if q in self._subs:
                self._subs.remove(q)

    def _send(self, frame: dict) -> None:
        for q in self._subs:
            try:
                q.put_nowait(frame)
            except queue.Full:
                try:
                    q.get_nowait()  # drop the oldest frame
                except queue.Empty:
                    pass
                q.put_nowait(frame)

    def _publish(self) -> None:
        tick = self.run.world.tick
        entries = self.run.manager.chat.entries()
        while self._chat_cursor < len(entries):
            entry = entries[self._chat_cursor]
            self._chat_cursor += 1
            self._send(_frame("chat", entry.to_dict(), tick))
        for rid, record in sorted(self.run.manager.records.items()):
            digest = f"{record.status.value}:{record.assignment.step_id}"
            if self._record_cache.get(rid) != digest:
                self._record_cache[rid] = digest
                self._send(_frame("task", record.to_dict(), tick))
        for row in self._robot_rows():
            key = (row["posture"], tuple(row["position"]), row["busy"], row["instruction"])
            if self._robot_cache.get(row["id"]) != key:
                self._robot_cache[row["id"]] = key
                self._send(_frame("robot", row, tick))
        if tick % self.world_every == 0:
            self._send(_frame("world", self.run.world.snapshot(), tick))

    def _robot_rows(self) -> list[dict]:
        rows = []
        for rid in sorted(self.run.agents):
            agent = self.run.agents[rid]
            entity = self.run.world.entities[rid]
            rows.append(
                {
                    "id": rid,
                    "posture": entity.posture,
                    "position": [round(entity.position[0], 3), round(entity.position[1], 3)],
                    "busy": agent.active is not None,
                    "instruction": agent.active.instruction if agent.active else "",
                    "status": "in_progress" if agent.active else "",
                }
            )
        return rows

    # ------------------------------------------------------------ inbound side

    def human_input(self, text: str) -> None:
        with self._lock:
            self.run.bus.post(
                self._human_sender,
                MANAGER_ID,
                self.run.world.tick,
                busmod.Kind.HUMAN_INPUT,
                {"text": text, "source": self._human_sender},
            )

    def snapshot(self) -> dict:
        with self._lock:
            state = self.run.manager.export_state()
            return {
                "tick": self.run.world.tick,
                "chat": state["chat"],
                "tasks": state["records"],
                "robots": self._robot_rows(),
                "world": self.run.world.snapshot(),
                "goals": [g.to_dict() for g in self.run.config.goals],
                "finished": self.finished.is_set(),
            }


def build_app(handle: RunHandle) -> FastAPI:
    app = FastAPI(title="fleetmind gateway")

    @app.get("/snapshot")
    def snapshot() -> dict:
        return handle.snapshot()

    @app.get("/health")
    def health() -> dict:
        return {"ok": True, "tick": handle.run.world.tick}

    @app.websocket("/ws")
    async def ws_endpoint(websocket: WebSocket) -> None:
        await websocket.accept()
        q = handle.subscribe()
        closed = asyncio.Event()

        async def pump() -> None:
            while not closed.is_set():
                try:
                    frame = await run_in_threadpool(q.get, True, 0.2)
                except Exception:
                    continue
                if frame is None:
                    break
                try:
                    await websocket.send_json(frame)
                except Exception:
                    break

        pump_task = asyncio.create_task(pump())
        await websocket.send_json(_frame("hello", {"tick": handle.run.world.tick},
                                         handle.run.world.tick))
        try:
            while True:
                raw = await websocket.receive_text()
                try:
                    message = json.loads(raw)
                except json.JSONDecodeError:
                    await websocket.send_json(
                        _frame("error", {"detail": "malformed frame: not JSON"},
                               handle.run.world.tick)
                    )
                    continue
                if message.get("type") == "human_input" and isinstance(
                    message.get("payload"), dict
                ) and isinstance(message["payload"].get("text"), str):
                    handle.human_input(message["payload"]["text"])
                    await websocket.send_json(
                        _frame("ack", {"received": message["payload"]["text"]},
                               handle.run.world.tick)
                    )
                else:
                    await websocket.send_json(
                        _frame("error", {"detail": "malformed frame: unknown type"},
                               handle.run.world.tick)
                    )
        except WebSocketDisconnect:
            pass
        finally:
            closed.set()
            handle.unsubscribe(q)
            q.put(None)
            pump_task.cancel()

    return app


def serve(run: ScenarioRun, bind: str, tps: float = 20.0, world_every: int = 5) -> None:
    """Blocking entry point: start the run thread and the HTTP/WS gateway."""
    import uvicorn

    handle = RunHandle(run, tps=tps, world_every=world_every)
    handle.start()
    host, _, port = bind.partition(":")
    app = build_app(handle)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8700), log_level="warning")
