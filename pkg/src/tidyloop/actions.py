"""Action primitives and plan steps.

Binary primitives take (destination, item): ``put_on(table, cup)`` places
the cup on the table, ``put_in(box, cup)`` places the cup inside the box,
``put_near(plate, fork)`` places the fork near the plate.  Unary
primitives (open/close/slice) take the affected object only.

Arguments prefixed ``group:`` are category placeholders that the executor
expands to the group's members.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any, Mapping

from .scene import Relation, RelationKind, RelationSource

GROUP_PREFIX = "group:"


class Primitive(str, Enum):
    GROUP = "group"
    PUT_ON = "put_on"
    PUT_IN = "put_in"
    PUT_NEAR = "put_near"
    OPEN = "open"
    CLOSE = "close"
    SLICE = "slice"


UNARY_PRIMITIVES = frozenset({Primitive.OPEN, Primitive.CLOSE, Primitive.SLICE})


def arity(primitive: Primitive) -> int:
    return 1 if primitive in UNARY_PRIMITIVES else 2


def is_placeholder(arg: str) -> bool:
    return arg.startswith(GROUP_PREFIX)


def placeholder_category(arg: str) -> str:
    return arg[len(GROUP_PREFIX):]


@dataclass(frozen=True)
class ActionStep:
    primitive: Primitive
    args: tuple[str, ...]
    relation: Relation | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "primitive", Primitive(self.primitive))
        object.__setattr__(self, "args", tuple(self.args))
        if len(self.args) != arity(self.primitive):
            raise ValueError(
                f"{self.primitive.value} takes {arity(self.primitive)} argument(s), "
                f"got {len(self.args)}"
            )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"primitive": self.primitive.value, "args": list(self.args)}
        if self.relation is not None:
            out["relation"] = {
                "kind": self.relation.kind.value,
                "parent": self.relation.parent,
                "child": self.relation.child,
            }
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ActionStep":
        relation = None
        rel = data.get("relation")
        if rel:
            relation = Relation(
                kind=RelationKind(rel["kind"]),
                parent=rel["parent"],
                child=rel["child"],
                source=RelationSource(rel.get("source", "planner")),
            )
        return cls(
            primitive=Primitive(data["primitive"]),
            args=tuple(data["args"]),
            relation=relation,
        )
