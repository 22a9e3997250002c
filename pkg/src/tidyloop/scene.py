"""Scene graph data model: oriented-box objects, directed relations, groups.

Poses use a bottom-face convention: ``position`` is (x, y, z) where x, y
locate the footprint centre and z is the height of the bottom face, so a
stacked object's z equals its support parent's top face.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping

from .errors import CycleDetected, NodeUniverseMismatch, SceneGraphError
from .geometry import Footprint, ZInterval

TWO_PI = 2.0 * math.pi


class RelationKind(str, Enum):
    ON = "on"
    IN = "in"
    NEAR = "near"
    LEFT_OF = "left_of"
    RIGHT_OF = "right_of"
    FRONT_OF = "front_of"
    BEHIND = "behind"


SUPPORT_KINDS = frozenset({RelationKind.ON, RelationKind.IN})
ORIENTATION_KINDS = frozenset(
    {RelationKind.LEFT_OF, RelationKind.RIGHT_OF, RelationKind.FRONT_OF, RelationKind.BEHIND}
)


class RelationSource(str, Enum):
    PLANNER = "planner"
    HUMAN_ADJUSTMENT = "human_adjustment"
    INITIAL_OBSERVATION = "initial_observation"


@dataclass(frozen=True)
class Pose:
    """World-frame placement: position (x, y, z_bottom) plus yaw in [0, 2pi)."""

    position: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        yaw = float(self.yaw) % TWO_PI
        if yaw >= TWO_PI:  # tiny negatives wrap to exactly 2*pi in float
            yaw = 0.0
        object.__setattr__(self, "yaw", yaw)

    def translated(self, dx: float, dy: float, dz: float = 0.0) -> "Pose":
        x, y, z = self.position
        return Pose((x + dx, y + dy, z + dz), self.yaw)

    def to_dict(self) -> dict[str, Any]:
        return {"position": list(self.position), "yaw": self.yaw}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Pose":
        return cls(tuple(data["position"]), float(data.get("yaw", 0.0)))


@dataclass(frozen=True)
class Relation:
    """Directed edge: the child stands in ``kind`` relation to the parent
    (e.g. on(table, cup) means the cup is on the table)."""

    kind: RelationKind
    parent: str
    child: str
    source: RelationSource
    step_index: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", RelationKind(self.kind))
        object.__setattr__(self, "source", RelationSource(self.source))
        if self.parent == self.child:
            raise ValueError(f"self-loop relation on {self.parent!r}")

    def key(self) -> tuple[str, str, str]:
        """Identity for set semantics; provenance fields are excluded."""
        return (self.kind.value, self.parent, self.child)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "kind": self.kind.value,
            "parent": self.parent,
            "child": self.child,
            "source": self.source.value,
        }
        if self.step_index is not None:
            out["step_index"] = self.step_index
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Relation":
        return cls(
            kind=RelationKind(data["kind"]),
            parent=data["parent"],
            child=data["child"],
            source=RelationSource(data["source"]),
            step_index=data.get("step_index"),
        )


@dataclass
class ObjectNode:
    """One rigid object approximated by an oriented bounding box."""

    id: str
    label: str
    half_extents: tuple[float, float, float]
    mass: float
    category: str = ""
    pose: Pose | None = None
    states: dict[str, bool] = field(default_factory=dict)
    is_container: bool = False
    is_base: bool = False

    def __post_init__(self) -> None:
        self.half_extents = tuple(float(v) for v in self.half_extents)
        self.mass = float(self.mass)

    @property
    def placed(self) -> bool:
        return self.pose is not None

    def _require_pose(self) -> Pose:
        if self.pose is None:
            raise ValueError(f"node {self.id!r} has no pose")
        return self.pose

    def footprint(self) -> Footprint:
        pose = self._require_pose()
        return Footprint(
            center=(pose.position[0], pose.position[1]),
            half_extents=(self.half_extents[0], self.half_extents[1]),
            yaw=pose.yaw,
        )

    def z_interval(self) -> ZInterval:
        pose = self._require_pose()
        z = pose.position[2]
        return ZInterval(z, z + 2.0 * self.half_extents[2])

    @property
    def height(self) -> float:
        return 2.0 * self.half_extents[2]

    def top(self) -> float:
        return self._require_pose().position[2] + self.height

    def center(self) -> tuple[float, float, float]:
        x, y, z = self._require_pose().position
        return (x, y, z + self.half_extents[2])

    def copy(self) -> "ObjectNode":
        return replace(self, states=dict(self.states))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "label": self.label,
            "category": self.category,
            "half_extents": list(self.half_extents),
            "mass": self.mass,
            "pose": self.pose.to_dict() if self.pose else None,
            "states": dict(sorted(self.states.items())),
            "is_container": self.is_container,
            "is_base": self.is_base,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ObjectNode":
        pose = data.get("pose")
        return cls(
            id=data["id"],
            label=data["label"],
            half_extents=tuple(data["half_extents"]),
            mass=float(data["mass"]),
            category=data.get("category", ""),
            pose=Pose.from_dict(pose) if pose else None,
            states={k: bool(v) for k, v in data.get("states", {}).items()},
            is_container=bool(data.get("is_container", False)),
            is_base=bool(data.get("is_base", False)),
        )


@dataclass
class GroupDag:
    """Objects of one category plus the acyclic relations among them."""

    category: str
    member_ids: list[str]
    intra_edges: list[Relation] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "category": self.category,
            "members": list(self.member_ids),
            "intra_edges": [e.to_dict() for e in self.intra_edges],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GroupDag":
        return cls(
            category=data["category"],
            member_ids=list(data["members"]),
            intra_edges=[Relation.from_dict(e) for e in data.get("intra_edges", [])],
        )


class ChangeKind(str, Enum):
    RELATION_ADDED = "relation_added"
    RELATION_REMOVED = "relation_removed"
    STATE_CHANGED = "state_changed"


@dataclass(frozen=True)
class RelationChange:
    """One entry of a scene diff: an edge added/removed or a state flip."""

    kind: ChangeKind
    relation: Relation | None = None
    object_id: str | None = None
    state: str | None = None
    before: bool | None = None
    after: bool | None = None

    def reversed(self) -> "RelationChange":
        if self.kind is ChangeKind.RELATION_ADDED:
            return replace(self, kind=ChangeKind.RELATION_REMOVED)
        if self.kind is ChangeKind.RELATION_REMOVED:
            return replace(self, kind=ChangeKind.RELATION_ADDED)
        return replace(self, before=self.after, after=self.before)

    def to_dict(self) -> dict[str, Any]:
        if self.kind is ChangeKind.STATE_CHANGED:
            return {
                "kind": self.kind.value,
                "object_id": self.object_id,
                "state": self.state,
                "before": self.before,
                "after": self.after,
            }
        assert self.relation is not None
        return {"kind": self.kind.value, "relation": self.relation.to_dict()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RelationChange":
        kind = ChangeKind(data["kind"])
        if kind is ChangeKind.STATE_CHANGED:
            return cls(
                kind=kind,
                object_id=data["object_id"],
                state=data["state"],
                before=data.get("before"),
                after=data.get("after"),
            )
        return cls(kind=kind, relation=Relation.from_dict(data["relation"]))


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    subjects: tuple[str, ...] = ()


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def codes(self) -> set[str]:
        return {v.code for v in self.violations}

    def add(self, code: str, message: str, *subjects: str) -> None:
        self.violations.append(Violation(code, message, subjects))


class SceneGraph:
    """Objects plus directed relation edges plus optional category groups.

    Treated as an immutable snapshot once shared: mutation helpers return
    new graphs instead of editing in place.
    """

    def __init__(
        self,
        nodes: Iterable[ObjectNode] | Mapping[str, ObjectNode] = (),
        edges: Iterable[Relation] = (),
        groups: Iterable[GroupDag] = (),
    ):
        if isinstance(nodes, Mapping):
            node_list = list(nodes.values())
        else:
            node_list = list(nodes)
        self.nodes: dict[str, ObjectNode] = {}
        for node in node_list:
            if node.id in self.nodes:
                raise SceneGraphError(f"duplicate node id {node.id!r}")
            self.nodes[node.id] = node
        self.edges: list[Relation] = list(edges)
        self.groups: list[GroupDag] = list(groups)

    # -- basic access ------------------------------------------------------

    def node(self, node_id: str) -> ObjectNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise SceneGraphError(f"unknown node id {node_id!r}") from None

    def movable_ids(self) -> list[str]:
        return sorted(i for i, n in self.nodes.items() if not n.is_base)

    def base_ids(self) -> list[str]:
        return sorted(i for i, n in self.nodes.items() if n.is_base)

    def support_edges(self) -> list[Relation]:
        return [e for e in self.edges if e.kind in SUPPORT_KINDS]

    def support_parent(self, node_id: str) -> Relation | None:
        found = None
        for e in self.edges:
            if e.kind in SUPPORT_KINDS and e.child == node_id:
                if found is not None:
                    raise SceneGraphError(f"node {node_id!r} has multiple support parents")
                found = e
        return found

    def support_children(self, node_id: str) -> list[Relation]:
        return [e for e in self.edges if e.kind in SUPPORT_KINDS and e.parent == node_id]

    def relations_incident(self, node_ids: Iterable[str]) -> list[Relation]:
        wanted = set(node_ids)
        return [e for e in self.edges if e.parent in wanted or e.child in wanted]

    def edge_keys(self) -> set[tuple[str, str, str]]:
        return {e.key() for e in self.edges}

    # -- structure queries -------------------------------------------------

    def depth_levels(self) -> dict[int, list[str]]:
        """Partition nodes by support depth: roots (no on/in parent) at 0.

        Raises CycleDetected if the support edges contain a cycle.
        """
        parent_of: dict[str, str] = {}
        for e in self.edges:
            if e.kind not in SUPPORT_KINDS:
                continue
            if e.child in parent_of:
                raise SceneGraphError(f"node {e.child!r} has multiple support parents")
            parent_of[e.child] = e.parent

        children: dict[str, list[str]] = {}
        for child, parent in parent_of.items():
            children.setdefault(parent, []).append(child)

        levels: dict[int, list[str]] = {}
        seen: set[str] = set()
        frontier = sorted(i for i in self.nodes if i not in parent_of)
        depth = 0
        while frontier:
            levels[depth] = frontier
            seen.update(frontier)
            nxt: list[str] = []
            for node_id in frontier:
                nxt.extend(c for c in children.get(node_id, []) if c in self.nodes)
            frontier = sorted(nxt)
            depth += 1
        if len(seen) != len(self.nodes):
            cyclic = sorted(set(self.nodes) - seen)
            raise CycleDetected(f"support edges contain a cycle involving {cyclic}")
        return levels

    def depth_of(self, node_id: str) -> int:
        for depth, ids in self.depth_levels().items():
            if node_id in ids:
                return depth
        raise SceneGraphError(f"unknown node id {node_id!r}")

    def support_subtree(self, root_id: str) -> set[str]:
        """Ids transitively supported by ``root_id`` (root excluded)."""
        out: set[str] = set()
        stack = [root_id]
        while stack:
            current = stack.pop()
            for e in self.support_children(current):
                if e.child not in out and e.child in self.nodes:
                    out.add(e.child)
                    stack.append(e.child)
        return out

    def containment_exempt_pairs(self) -> set[frozenset[str]]:
        """Pairs (container, descendant) that legitimately overlap because the
        descendant sits inside the container; excluded from collision checks."""
        out: set[frozenset[str]] = set()
        for e in self.edges:
            if e.kind is not RelationKind.IN or e.parent not in self.nodes:
                continue
            inside = {e.child} | self.support_subtree(e.child)
            for member in inside:
                out.add(frozenset((e.parent, member)))
        return out

    # -- diffing -----------------------------------------------------------

    def diff(self, after: "SceneGraph") -> list[RelationChange]:
        """Relation and state changes turning this graph into ``after``."""
        if set(self.nodes) != set(after.nodes):
            raise NodeUniverseMismatch(
                f"node ids differ: {sorted(set(self.nodes) ^ set(after.nodes))}"
            )
        changes: list[RelationChange] = []
        before_keys = {e.key(): e for e in self.edges}
        after_keys = {e.key(): e for e in after.edges}
        for key in sorted(set(before_keys) - set(after_keys)):
            changes.append(
                RelationChange(ChangeKind.RELATION_REMOVED, relation=before_keys[key])
            )
        for key in sorted(set(after_keys) - set(before_keys)):
            changes.append(
                RelationChange(ChangeKind.RELATION_ADDED, relation=after_keys[key])
            )
        for node_id in sorted(self.nodes):
            b, a = self.nodes[node_id].states, after.nodes[node_id].states
            for state in sorted(set(b) | set(a)):
                if b.get(state) != a.get(state):
                    changes.append(
                        RelationChange(
                            ChangeKind.STATE_CHANGED,
                            object_id=node_id,
                            state=state,
                            before=b.get(state),
                            after=a.get(state),
                        )
                    )
        return changes

    def apply_changes(self, changes: Iterable[RelationChange]) -> "SceneGraph":
        """Apply a diff as an edit script, returning a new graph."""
        graph = self.copy()
        for change in changes:
            if change.kind is ChangeKind.RELATION_REMOVED:
                assert change.relation is not None
                key = change.relation.key()
                graph.edges = [e for e in graph.edges if e.key() != key]
            elif change.kind is ChangeKind.RELATION_ADDED:
                assert change.relation is not None
                if change.relation.key() not in graph.edge_keys():
                    graph.edges.append(change.relation)
            else:
                node = graph.node(change.object_id or "")
                if change.after is None:
                    node.states.pop(change.state or "", None)
                else:
                    node.states[change.state or ""] = change.after
        return graph

    # -- validation --------------------------------------------------------

    def validate(self) -> ValidationReport:
        """Collect every invariant violation; an empty report means well-formed."""
        report = ValidationReport()
        for node in self.nodes.values():
            if any(v <= 0.0 for v in node.half_extents):
                report.add("BadHalfExtents", f"{node.id}: non-positive extent", node.id)
            if node.mass <= 0.0:
                report.add("BadMass", f"{node.id}: non-positive mass", node.id)
            if node.is_container and "open" not in node.states:
                report.add("ContainerStateMissing", f"{node.id}: container without open state", node.id)
            if not node.is_container and "open" in node.states:
                report.add("SpuriousOpenState", f"{node.id}: open state on non-container", node.id)

        support_parents: dict[str, int] = {}
        for e in self.edges:
            missing = [i for i in (e.parent, e.child) if i not in self.nodes]
            for node_id in missing:
                report.add("DanglingEdge", f"edge references unknown id {node_id!r}", node_id)
            if missing:
                continue
            if e.kind is RelationKind.IN and not self.nodes[e.parent].is_container:
                report.add("NonContainerIn", f"in-edge parent {e.parent!r} is not a container", e.parent)
            if e.kind in SUPPORT_KINDS:
                if self.nodes[e.child].is_base:
                    report.add("BaseAsChild", f"base {e.child!r} is a support child", e.child)
                support_parents[e.child] = support_parents.get(e.child, 0) + 1

        for node_id, count in support_parents.items():
            if count > 1:
                report.add("MultipleSupportParents", f"{node_id}: {count} support parents", node_id)

        if not any(v.code == "MultipleSupportParents" or v.code == "DanglingEdge" for v in report.violations):
            try:
                self.depth_levels()
            except CycleDetected as exc:
                report.add("SupportCycle", str(exc))

        for group in self.groups:
            member_set = set(group.member_ids)
            for member in group.member_ids:
                if member not in self.nodes:
                    report.add("GroupMemberUnknown", f"group {group.category}: unknown member {member!r}", member)
                elif self.nodes[member].category and self.nodes[member].category != group.category:
                    report.add(
                        "GroupCategoryMismatch",
                        f"{member}: category {self.nodes[member].category!r} != group {group.category!r}",
                        member,
                    )
            for e in group.intra_edges:
                if e.parent not in member_set or e.child not in member_set:
                    report.add("GroupEdgeOutsideMembers", f"group {group.category}: edge {e.key()} leaves group")
            if _has_cycle(group.member_ids, group.intra_edges):
                report.add("GroupIntraEdgeCycle", f"group {group.category}: intra edges cyclic")
        return report

    # -- copies and updates -------------------------------------------------

    def copy(self) -> "SceneGraph":
        return SceneGraph(
            nodes=[n.copy() for n in self.nodes.values()],
            edges=list(self.edges),
            groups=[GroupDag(g.category, list(g.member_ids), list(g.intra_edges)) for g in self.groups],
        )

    def with_poses(self, poses: Mapping[str, Pose]) -> "SceneGraph":
        graph = self.copy()
        for node_id, pose in poses.items():
            graph.node(node_id).pose = pose
        return graph

    # -- serialization -------------------------------------------------------

    def to_document(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "nodes": [self.nodes[i].to_dict() for i in sorted(self.nodes)],
            "edges": [e.to_dict() for e in sorted(self.edges, key=lambda e: e.key())],
        }
        if self.groups:
            doc["groups"] = [g.to_dict() for g in self.groups]
        return doc

    @classmethod
    def from_document(cls, doc: Mapping[str, Any]) -> "SceneGraph":
        return cls(
            nodes=[ObjectNode.from_dict(n) for n in doc.get("nodes", [])],
            edges=[Relation.from_dict(e) for e in doc.get("edges", [])],
            groups=[GroupDag.from_dict(g) for g in doc.get("groups", [])],
        )

    def canonical_json(self) -> str:
        return canonical_dumps(self.to_document())


def _has_cycle(node_ids: Iterable[str], edges: Iterable[Relation]) -> bool:
    ids = set(node_ids)
    adjacency: dict[str, list[str]] = {i: [] for i in ids}
    indegree = {i: 0 for i in ids}
    for e in edges:
        if e.parent in ids and e.child in ids:
            adjacency[e.parent].append(e.child)
            indegree[e.child] += 1
    frontier = [i for i in ids if indegree[i] == 0]
    seen = 0
    while frontier:
        current = frontier.pop()
        seen += 1
        for nxt in adjacency[current]:
            indegree[nxt] -= 1
            if indegree[nxt] == 0:
                frontier.append(nxt)
    return seen != len(ids)


def canonical_dumps(data: Any) -> str:
    """Stable JSON used everywhere bytes must be reproducible."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def load_scene(path: str) -> SceneGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return SceneGraph.from_document(json.load(fh))


def save_scene(graph: SceneGraph, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_dumps(graph.to_document()))
        fh.write("\n")
