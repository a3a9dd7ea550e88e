"""Event vocabulary shared by replicas and the simulation engine."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional


class EventKind(Enum):
    SEND = "send"
    DELIVER = "deliver"
    PROPOSE = "propose"
    VOTE = "vote"
    TIMEOUT = "timeout"
    VIEW_ENTER = "view_enter"
    QC_FORMED = "qc_formed"
    TC_FORMED = "tc_formed"
    COMMIT = "commit"
    DROP = "drop"


@dataclass(frozen=True)
class TraceEvent:
    time: float
    seq: int
    kind: EventKind
    replica: int
    detail: dict[str, Any]

    def to_json(self) -> str:
        return json.dumps(
            {
                "t": self.time,
                "seq": self.seq,
                "kind": self.kind.value,
                "replica": self.replica,
                "detail": self.detail,
            },
            sort_keys=True,
        )


@dataclass
class Outbox:
    """What one event-handler invocation produced.

    `sends` are (destination replica, message) pairs; messages addressed to
    the sender itself still travel through the simulated network so every
    replica observes its own traffic with the same delay accounting as its
    peers'.  `timer` is an absolute deadline re-arming the view timer.
    """

    sends: list[tuple[int, Any]] = field(default_factory=list)
    timer: Optional[float] = None
    events: list[tuple[EventKind, dict[str, Any]]] = field(default_factory=list)

    def send(self, dest: int, msg: Any) -> None:
        self.sends.append((dest, msg))

    def broadcast(self, n: int, msg: Any) -> None:
        for dest in range(n):
            self.sends.append((dest, msg))

    def event(self, kind: EventKind, **detail: Any) -> None:
        self.events.append((kind, detail))
