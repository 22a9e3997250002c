"""Feedback events exchanged between synthesizer, executor, and humans."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any


class EventKind(str, Enum):
    COLLISION = "collision"
    COLLAPSE = "collapse"
    PRECONDITION_FAILURE = "precondition_failure"
    INSTRUCTION = "instruction"
    ADJUSTMENT = "adjustment"


class EventOrigin(str, Enum):
    SYNTHESIZER = "synthesizer"
    EXECUTOR = "executor"
    HUMAN = "human"


PHYSICAL_KINDS = frozenset(
    {EventKind.COLLISION, EventKind.COLLAPSE, EventKind.PRECONDITION_FAILURE}
)
PREFERENCE_KINDS = frozenset({EventKind.INSTRUCTION, EventKind.ADJUSTMENT})

_VALID_ORIGINS = {
    EventKind.COLLISION: {EventOrigin.SYNTHESIZER, EventOrigin.EXECUTOR},
    EventKind.COLLAPSE: {EventOrigin.SYNTHESIZER, EventOrigin.EXECUTOR},
    EventKind.PRECONDITION_FAILURE: {EventOrigin.SYNTHESIZER, EventOrigin.EXECUTOR},
    EventKind.INSTRUCTION: {EventOrigin.HUMAN},
    EventKind.ADJUSTMENT: {EventOrigin.HUMAN},
}


@dataclass
class FeedbackEvent:
    """One unit of feedback injected into the planning loop.

    Physical kinds (collision/collapse/precondition_failure) may only
    originate from the synthesizer or executor; preference kinds
    (instruction/adjustment) only from a human.
    """

    kind: EventKind
    payload: dict[str, Any] = field(default_factory=dict)
    origin: EventOrigin = EventOrigin.SYNTHESIZER
    seq: int | None = None

    def __post_init__(self) -> None:
        self.kind = EventKind(self.kind)
        self.origin = EventOrigin(self.origin)
        if self.origin not in _VALID_ORIGINS[self.kind]:
            raise ValueError(
                f"event kind {self.kind.value!r} cannot originate from {self.origin.value!r}"
            )

    @property
    def is_physical(self) -> bool:
        return self.kind in PHYSICAL_KINDS

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "kind": self.kind.value,
            "origin": self.origin.value,
            "payload": self.payload,
        }
        if self.seq is not None:
            out["seq"] = self.seq
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "FeedbackEvent":
        return cls(
            kind=EventKind(data["kind"]),
            payload=dict(data.get("payload", {})),
            origin=EventOrigin(data["origin"]),
            seq=data.get("seq"),
        )
