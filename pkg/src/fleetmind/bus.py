"""In-process coordination bus: ordered, exactly-once, fully audited delivery.

Messages are tick-stamped envelopes. Delivery to a recipient is a
deterministic merge: (tick, sender id, per-sender sequence). The bus keeps a
complete audit log of every accepted envelope, written as JSON lines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Mapping, Optional


class Kind(str, Enum):
    ASSIGN_TASK = "ASSIGN_TASK"
    CANCEL_TASK = "CANCEL_TASK"
    STATUS_UPDATE = "STATUS_UPDATE"
    EVENT_REPORT = "EVENT_REPORT"
    HUMAN_INPUT = "HUMAN_INPUT"
    HELP_REQUEST = "HELP_REQUEST"
    HELP_DONE = "HELP_DONE"
    PLAN_POSTED = "PLAN_POSTED"


BROADCAST = "*"

# Required payload keys per kind; send() rejects envelopes that miss any.
_PAYLOAD_SCHEMAS: dict[Kind, frozenset[str]] = {
    Kind.ASSIGN_TASK: frozenset({"record_id", "assignee", "instruction"}),
    Kind.CANCEL_TASK: frozenset({"record_id", "reason"}),
    Kind.STATUS_UPDATE: frozenset({"record_id", "status"}),
    Kind.EVENT_REPORT: frozenset({"event_id", "description", "tick", "source"}),
    Kind.HUMAN_INPUT: frozenset({"text", "source"}),
    Kind.HELP_REQUEST: frozenset({"record_id", "instruction", "assignee"}),
    Kind.HELP_DONE: frozenset({"record_id"}),
    Kind.PLAN_POSTED: frozenset({"plan"}),
}


class RejectedEnvelope(Exception):
    pass


@dataclass(frozen=True)
class Envelope:
    sender: str
    msg_id: int
    recipient: str
    tick: int
    kind: Kind
    payload: Mapping

    def to_dict(self) -> dict:
        return {
            "sender": self.sender,
            "msg_id": self.msg_id,
            "recipient": self.recipient,
            "tick": self.tick,
            "kind": self.kind.value,
            "payload": dict(self.payload),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Envelope":
        return cls(
            sender=str(data["sender"]),
            msg_id=int(data["msg_id"]),
            recipient=str(data["recipient"]),
            tick=int(data["tick"]),
            kind=Kind(data["kind"]),
            payload=dict(data["payload"]),
        )


@dataclass
class _Pending:
    envelope: Envelope
    arrival: int  # global arrival counter, breaks nothing: per-sender msg_id
    # already orders a sender's messages; arrival keeps the sort total.


class Bus:
    """Deterministic in-process message fabric.

    Duplicates by (sender, msg_id) are dropped idempotently. drain() returns
    per-recipient messages merged by (tick, sender, msg_id); drained messages
    are never redelivered. Every accepted envelope is appended to the audit
    log exactly once.
    """

    def __init__(self, log_stream: Optional[IO[str]] = None) -> None:
        self._seen: set[tuple[str, int]] = set()
        self._inbox: dict[str, list[Envelope]] = {}
        self._recipients: set[str] = set()
        self._log: list[Envelope] = []
        self._log_stream = log_stream
        self._unflushed: list[Envelope] = []
        self._next_msg_id: dict[str, int] = {}
        self._last_tick: dict[str, int] = {}

    def register(self, recipient: str) -> None:
        self._recipients.add(recipient)
        self._inbox.setdefault(recipient, [])

    def next_msg_id(self, sender: str) -> int:
        n = self._next_msg_id.get(sender, 0)
        self._next_msg_id[sender] = n + 1
        return n

    def send(self, env: Envelope) -> bool:
        """Enqueue an envelope. Returns False for an idempotent duplicate drop."""
        required = _PAYLOAD_SCHEMAS[env.kind]
        missing = sorted(required - set(env.payload))
        if missing:
            raise RejectedEnvelope(f"{env.kind.value} payload missing fields: {missing}")
        if env.tick < self._last_tick.get(env.sender, 0):
            raise RejectedEnvelope(
                f"sender {env.sender!r} tick went backwards: {env.tick}"
            )
        key = (env.sender, env.msg_id)
        if key in self._seen:
            return False
        self._seen.add(key)
        self._last_tick[env.sender] = env.tick
        self._log.append(env)
        self._unflushed.append(env)
        if env.recipient == BROADCAST:
            for recipient in self._recipients:
                self._inbox[recipient].append(env)
        else:
            self._inbox.setdefault(env.recipient, []).append(env)
        return True

    def post(
        self, sender: str, recipient: str, tick: int, kind: Kind, payload: Mapping
    ) -> Envelope:
        """Build an envelope with the sender's next msg_id and send it."""
        env = Envelope(
            sender=sender,
            msg_id=self.next_msg_id(sender),
            recipient=recipient,
            tick=tick,
            kind=kind,
            payload=payload,
        )
        self.send(env)
        return env

    def drain(self, recipient: str) -> list[Envelope]:
        pending = self._inbox.get(recipient, [])
        if not pending:
            return []
        ordered = sorted(pending, key=lambda e: (e.tick, e.sender, e.msg_id))
        self._inbox[recipient] = []
        return ordered

    def peek_count(self, recipient: str) -> int:
        return len(self._inbox.get(recipient, []))

    def log(self) -> tuple[Envelope, ...]:
        return tuple(self._log)

    def flush_log(self) -> None:
        if self._log_stream is None:
            self._unflushed.clear()
            return
        for env in self._unflushed:
            self._log_stream.write(
                json.dumps(env.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"
            )
        self._log_stream.flush()
        self._unflushed.clear()
