"""Benchmark scenario sampler and the metric/scoring pipeline.

Activity attribute means follow the published four-activity table (objects,
states, actions, scenario amounts); sampled counts treat them as means, not
hard constraints.  Metrics are min-max normalized to [0, 10] over a batch,
monotone increasing in the raw value.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import EmptyBatch, TidyloopError, UnknownPreferenceTag
from .planner import ExecutionOutcome, Plan, execute_symbolically, plan_task
from .preferences import similarity
from .scene import (
    GroupDag,
    ObjectNode,
    Pose,
    Relation,
    RelationKind,
    RelationSource,
    SceneGraph,
    canonical_dumps,
)
from .synthesis import PoseSolution


class ActivityType(str, Enum):
    TIDY = "tidy"
    CLEAN = "clean"
    PACK_UNPACK = "pack_unpack"
    LOAD_UNLOAD = "load_unload"


# (objects, states, actions, scenario amount) means per activity
ACTIVITY_ATTRIBUTES: dict[ActivityType, tuple[int, int, int, int]] = {
    ActivityType.TIDY: (14, 10, 10, 150),
    ActivityType.CLEAN: (21, 16, 12, 100),
    ActivityType.PACK_UNPACK: (19, 11, 11, 80),
    ActivityType.LOAD_UNLOAD: (17, 12, 11, 80),
}

DEFAULT_PREFERENCES: dict[ActivityType, tuple[str, str]] = {
    ActivityType.TIDY: (
        "I prefer everything to be laid flat on the table rather than stacked together",
        "no_stacking",
    ),
    ActivityType.CLEAN: (
        "I like all the cleaning supplies kept in the same container",
        "same_container",
    ),
    ActivityType.PACK_UNPACK: (
        "I prefer nothing unrelated to sleeping on the bed",
        "keep_bed_clear",
    ),
    ActivityType.LOAD_UNLOAD: (
        "I want everything placed in the same container",
        "same_container",
    ),
}

ACTION_VOCABULARY: dict[ActivityType, tuple[str, ...]] = {
    ActivityType.TIDY: ("group", "put_on", "put_near", "open", "close"),
    ActivityType.CLEAN: ("group", "put_on", "put_in", "put_near", "open", "close", "slice"),
    ActivityType.PACK_UNPACK: ("group", "put_on", "put_in", "put_near", "open", "close"),
    ActivityType.LOAD_UNLOAD: ("group", "put_on", "put_in", "put_near", "open", "close"),
}

INSTRUCTIONS: dict[ActivityType, str] = {
    ActivityType.TIDY: "tidy up the table",
    ActivityType.CLEAN: "clean up the room",
    ActivityType.PACK_UNPACK: "unpack the suitcase",
    ActivityType.LOAD_UNLOAD: "unload everything from the car",
}

# label -> ((hx_lo, hx_hi), (hy_lo, hy_hi), (hz_lo, hz_hi), (mass_lo, mass_hi), container)
_CatalogEntry = tuple[
    tuple[float, float], tuple[float, float], tuple[float, float], tuple[float, float], bool
]

_CATALOGS: dict[ActivityType, dict[str, _CatalogEntry]] = {
    ActivityType.TIDY: {
        "book": ((0.07, 0.11), (0.05, 0.08), (0.010, 0.020), (0.2, 0.8), False),
        "magazine": ((0.10, 0.14), (0.07, 0.10), (0.002, 0.006), (0.1, 0.4), False),
        "notebook": ((0.08, 0.10), (0.06, 0.08), (0.004, 0.010), (0.1, 0.4), False),
        "mug": ((0.035, 0.05), (0.035, 0.05), (0.04, 0.06), (0.2, 0.5), False),
        "cup": ((0.03, 0.045), (0.03, 0.045), (0.04, 0.06), (0.15, 0.35), False),
        "plate": ((0.08, 0.12), (0.08, 0.12), (0.008, 0.015), (0.3, 0.7), False),
        "bowl": ((0.06, 0.09), (0.06, 0.09), (0.03, 0.05), (0.25, 0.6), False),
        "pen": ((0.06, 0.08), (0.004, 0.007), (0.004, 0.007), (0.01, 0.03), False),
        "pencil": ((0.06, 0.09), (0.004, 0.006), (0.004, 0.006), (0.005, 0.02), False),
        "phone": ((0.03, 0.04), (0.06, 0.08), (0.004, 0.006), (0.12, 0.25), False),
        "toy": ((0.03, 0.06), (0.03, 0.06), (0.02, 0.05), (0.05, 0.4), False),
        "box": ((0.08, 0.13), (0.06, 0.10), (0.04, 0.08), (0.3, 1.0), True),
    },
    ActivityType.CLEAN: {
        "sponge": ((0.04, 0.06), (0.03, 0.04), (0.015, 0.025), (0.02, 0.06), False),
        "spray": ((0.035, 0.045), (0.035, 0.045), (0.10, 0.14), (0.4, 0.9), False),
        "brush": ((0.08, 0.12), (0.02, 0.03), (0.02, 0.03), (0.08, 0.2), False),
        "soap": ((0.03, 0.05), (0.02, 0.035), (0.01, 0.02), (0.08, 0.15), False),
        "cloth": ((0.08, 0.12), (0.08, 0.12), (0.004, 0.01), (0.04, 0.12), False),
        "towel": ((0.07, 0.10), (0.05, 0.08), (0.01, 0.02), (0.1, 0.3), False),
        "bucket": ((0.12, 0.15), (0.12, 0.15), (0.10, 0.15), (0.4, 1.0), True),
        "bin": ((0.16, 0.22), (0.13, 0.18), (0.12, 0.18), (0.5, 1.2), True),
    },
    ActivityType.PACK_UNPACK: {
        "towel": ((0.08, 0.11), (0.06, 0.09), (0.01, 0.03), (0.2, 0.5), False),
        "blanket": ((0.12, 0.16), (0.10, 0.13), (0.03, 0.06), (0.6, 1.4), False),
        "pillow": ((0.14, 0.19), (0.11, 0.14), (0.05, 0.09), (0.4, 0.9), False),
        "book": ((0.07, 0.11), (0.05, 0.08), (0.010, 0.020), (0.2, 0.8), False),
        "toy": ((0.03, 0.06), (0.03, 0.06), (0.02, 0.05), (0.05, 0.4), False),
        "phone": ((0.03, 0.04), (0.06, 0.08), (0.004, 0.006), (0.12, 0.25), False),
        "suitcase": ((0.25, 0.32), (0.18, 0.24), (0.08, 0.12), (2.0, 4.5), True),
    },
    ActivityType.LOAD_UNLOAD: {
        "box": ((0.05, 0.09), (0.04, 0.07), (0.04, 0.07), (0.3, 1.5), False),
        "bottle": ((0.03, 0.045), (0.03, 0.045), (0.09, 0.14), (0.4, 1.2), False),
        "toy": ((0.03, 0.06), (0.03, 0.06), (0.02, 0.05), (0.05, 0.4), False),
        "book": ((0.07, 0.11), (0.05, 0.08), (0.010, 0.020), (0.2, 0.8), False),
        "towel": ((0.10, 0.14), (0.08, 0.12), (0.01, 0.03), (0.2, 0.5), False),
        "basket": ((0.12, 0.16), (0.09, 0.12), (0.06, 0.10), (0.4, 0.9), True),
    },
}

# realism caps: sampled scenes carry at most this many of a label
_LABEL_CAPS: dict[ActivityType, dict[str, int]] = {
    ActivityType.TIDY: {"box": 2},
    ActivityType.CLEAN: {"bucket": 1, "bin": 1},
    ActivityType.PACK_UNPACK: {"suitcase": 1, "blanket": 2, "pillow": 2},
    ActivityType.LOAD_UNLOAD: {"basket": 2},
}


@dataclass
class ScenarioSpec:
    activity_type: ActivityType
    object_count_range: tuple[int, int]
    state_count: int
    action_vocabulary: tuple[str, ...]
    default_preference: str
    seed: int = 0
    semantic: bool = True

    def __post_init__(self) -> None:
        self.activity_type = ActivityType(self.activity_type)
        lo, hi = self.object_count_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"bad object count range {self.object_count_range}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "activity_type": self.activity_type.value,
            "object_count_range": list(self.object_count_range),
            "state_count": self.state_count,
            "action_vocabulary": list(self.action_vocabulary),
            "default_preference": self.default_preference,
            "seed": self.seed,
            "semantic": self.semantic,
        }


def default_spec(activity: ActivityType | str, seed: int = 0, semantic: bool = True) -> ScenarioSpec:
    activity = ActivityType(activity)
    objects, states, _actions, _amount = ACTIVITY_ATTRIBUTES[activity]
    text, _tag = DEFAULT_PREFERENCES[activity]
    return ScenarioSpec(
        activity_type=activity,
        object_count_range=(max(1, objects - 4), objects + 4),
        state_count=states,
        action_vocabulary=ACTION_VOCABULARY[activity],
        default_preference=text,
        seed=seed,
        semantic=semantic,
    )


@dataclass
class Scenario:
    scene: SceneGraph
    instruction: str
    preference_text: str
    preference_tag: str
    surface_id: str


def mix_or_separate(category_counts: Mapping[str, int]) -> str:
    """Ground-truth rule for the non-semantic variant: mix when any category
    holds less than a third or more than two thirds of the objects."""
    total = sum(category_counts.values())
    if total == 0:
        return "separate"
    for count in category_counts.values():
        fraction = count / total
        if fraction < 1.0 / 3.0 or fraction > 2.0 / 3.0:
            return "mix"
    return "separate"


def _bases_for(activity: ActivityType) -> list[ObjectNode]:
    table = ObjectNode(
        id="table", label="table", half_extents=(0.8, 0.5, 0.36), mass=30.0,
        pose=Pose((0.0, 0.0, 0.0)), is_base=True,
    )
    if activity is ActivityType.PACK_UNPACK:
        bed = ObjectNode(
            id="bed", label="bed", half_extents=(0.95, 0.7, 0.25), mass=60.0,
            pose=Pose((2.5, 0.0, 0.0)), is_base=True,
        )
        return [table, bed]
    if activity is ActivityType.LOAD_UNLOAD:
        cart = ObjectNode(
            id="cart", label="cart", half_extents=(0.60, 0.45, 0.30), mass=25.0,
            pose=Pose((2.0, 0.0, 0.0)), states={"open": True}, is_container=True, is_base=True,
        )
        return [table, cart]
    return [table]


def _scatter_pose(
    rng: np.random.Generator, surface: ObjectNode, node: ObjectNode, placed: list[ObjectNode]
) -> Pose:
    """Collision-light scatter on the surface for the initial (messy) scene."""
    sx, sy, _ = surface.pose.position
    hx, hy = surface.half_extents[0], surface.half_extents[1]
    top = surface.top()
    for _ in range(40):
        x = sx + float(rng.uniform(-(hx - node.half_extents[0]), hx - node.half_extents[0]))
        y = sy + float(rng.uniform(-(hy - node.half_extents[1]), hy - node.half_extents[1]))
        candidate = Pose((x, y, top), float(rng.uniform(0.0, 2.0 * math.pi)))
        trial = node.copy()
        trial.pose = candidate
        from .geometry import collides

        if not any(
            collides(trial.footprint(), trial.z_interval(), o.footprint(), o.z_interval())
            for o in placed
        ):
            return candidate
    return candidate  # messy scenes tolerate overlap as a last resort


def sample_scenario(spec: ScenarioSpec) -> Scenario:
    """Deterministic per-seed scenario: scene, task instruction, ground truth."""
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0xBE)))
    activity = spec.activity_type
    mean_objects = ACTIVITY_ATTRIBUTES[activity][0]
    lo, hi = spec.object_count_range
    count = int(round(float(np.clip(rng.normal(mean_objects, 2.0), lo, hi))))

    bases = _bases_for(activity)
    surface = bases[0]
    nodes: list[ObjectNode] = list(bases)
    edges: list[Relation] = []
    placed: list[ObjectNode] = []

    if spec.semantic:
        catalog = _CATALOGS[activity]
        labels = sorted(catalog)
        caps = _LABEL_CAPS.get(activity, {})
        counts: dict[str, int] = {}
        for index in range(count):
            pick = int(rng.integers(len(labels)))
            label = labels[pick]
            for offset in range(len(labels)):
                label = labels[(pick + offset) % len(labels)]
                if counts.get(label, 0) < caps.get(label, count):
                    break
            entry = catalog[label]
            node = ObjectNode(
                id=f"{label}{index}",
                label=label,
                half_extents=(
                    float(rng.uniform(*entry[0])),
                    float(rng.uniform(*entry[1])),
                    float(rng.uniform(*entry[2])),
                ),
                mass=float(rng.uniform(*entry[3])),
                is_container=entry[4],
                states={"open": bool(rng.random() < 0.3)} if entry[4] else {},
            )
            node.pose = _scatter_pose(rng, surface, node, placed)
            nodes.append(node)
            placed.append(node)
            edges.append(
                Relation(RelationKind.ON, surface.id, node.id, RelationSource.INITIAL_OBSERVATION)
            )
            counts[label] = counts.get(label, 0) + 1
        text, tag = DEFAULT_PREFERENCES[activity]
    else:
        counts = {"box": 0, "cylinder": 0}
        for index in range(count):
            label = "box" if rng.random() < 0.5 else "cylinder"
            counts[label] += 1
            if label == "box":
                he = (
                    float(rng.uniform(0.03, 0.08)),
                    float(rng.uniform(0.02, 0.06)),
                    float(rng.uniform(0.02, 0.05)),
                )
            else:
                radius = float(rng.uniform(0.02, 0.05))
                he = (radius, radius, float(rng.uniform(0.03, 0.08)))
            node = ObjectNode(
                id=f"{label}{index}", label=label, half_extents=he,
                mass=float(rng.uniform(0.05, 0.8)),
            )
            node.pose = _scatter_pose(rng, surface, node, placed)
            nodes.append(node)
            placed.append(node)
            edges.append(
                Relation(RelationKind.ON, surface.id, node.id, RelationSource.INITIAL_OBSERVATION)
            )
        counts = {k: v for k, v in counts.items() if v}
        tag = mix_or_separate(counts)
        text = (
            "I prefer the boxes and cylinders mixed together"
            if tag == "mix"
            else "I prefer the boxes and cylinders kept separate"
        )

    scene = SceneGraph(nodes=nodes, edges=edges)
    return Scenario(
        scene=scene,
        instruction=INSTRUCTIONS[activity],
        preference_text=text,
        preference_tag=tag,
        surface_id=surface.id,
    )


# --- tabletop sampler (dining-table setup: 3-5 objects from 7 categories) -----------

TABLETOP_CATALOG: list[tuple[str, str, tuple[float, float, float], float]] = [
    # (id, category, half_extents, mass): 26 items over 7 categories
    ("plate_a", "plate", (0.110, 0.110, 0.010), 0.55),
    ("plate_b", "plate", (0.100, 0.100, 0.010), 0.50),
    ("plate_c", "plate", (0.090, 0.090, 0.009), 0.45),
    ("plate_d", "plate", (0.120, 0.120, 0.011), 0.60),
    ("cup_a", "cup", (0.040, 0.040, 0.050), 0.25),
    ("cup_b", "cup", (0.037, 0.037, 0.045), 0.22),
    ("cup_c", "cup", (0.042, 0.042, 0.055), 0.28),
    ("cup_d", "cup", (0.035, 0.035, 0.048), 0.21),
    ("fork_a", "fork", (0.095, 0.012, 0.008), 0.05),
    ("fork_b", "fork", (0.090, 0.011, 0.008), 0.05),
    ("fork_c", "fork", (0.100, 0.013, 0.008), 0.06),
    ("fork_d", "fork", (0.085, 0.011, 0.007), 0.04),
    ("knife_a", "knife", (0.105, 0.010, 0.007), 0.06),
    ("knife_b", "knife", (0.100, 0.010, 0.007), 0.06),
    ("knife_c", "knife", (0.110, 0.011, 0.008), 0.07),
    ("knife_d", "knife", (0.095, 0.009, 0.007), 0.05),
    ("spoon_a", "spoon", (0.090, 0.014, 0.009), 0.05),
    ("spoon_b", "spoon", (0.085, 0.013, 0.008), 0.05),
    ("spoon_c", "spoon", (0.095, 0.015, 0.009), 0.06),
    ("spoon_d", "spoon", (0.080, 0.013, 0.008), 0.04),
    ("bowl_a", "bowl", (0.075, 0.075, 0.035), 0.35),
    ("bowl_b", "bowl", (0.070, 0.070, 0.032), 0.32),
    ("bowl_c", "bowl", (0.080, 0.080, 0.038), 0.38),
    ("glass_a", "glass", (0.035, 0.035, 0.060), 0.20),
    ("glass_b", "glass", (0.032, 0.032, 0.055), 0.18),
    ("glass_c", "glass", (0.038, 0.038, 0.065), 0.22),
]


def sample_tabletop_scene(seed: int) -> tuple[SceneGraph, str]:
    """Dining table with 3 to 5 catalog objects and their per-category groups,
    ready for pose synthesis.  Returns (goal-style scene, surface id)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x7AB)))
    table = ObjectNode(
        id="table", label="table", half_extents=(0.7, 0.45, 0.36), mass=30.0,
        pose=Pose((0.0, 0.0, 0.0)), is_base=True,
    )
    count = int(rng.integers(3, 6))
    picks = rng.choice(len(TABLETOP_CATALOG), size=count, replace=False)
    nodes = [table]
    edges = []
    grouped: dict[str, list[str]] = {}
    for pick in sorted(int(p) for p in picks):
        item_id, category, half_extents, mass = TABLETOP_CATALOG[pick]
        node = ObjectNode(
            id=item_id, label=category, half_extents=half_extents, mass=mass,
            category=category,
        )
        nodes.append(node)
        edges.append(Relation(RelationKind.ON, "table", item_id, RelationSource.PLANNER))
        grouped.setdefault(category, []).append(item_id)
    groups = [GroupDag(category=c, member_ids=sorted(ms)) for c, ms in sorted(grouped.items())]
    return SceneGraph(nodes=nodes, edges=edges, groups=groups), "table"


# --- preference predicates ------------------------------------------------------------


def _category(g: SceneGraph, node_id: str) -> str:
    node = g.nodes[node_id]
    return node.category or node.label


def _movable_on_movable(g: SceneGraph) -> list[Relation]:
    return [
        e
        for e in g.edges
        if e.kind is RelationKind.ON
        and e.parent in g.nodes
        and e.child in g.nodes
        and not g.nodes[e.parent].is_base
        and not g.nodes[e.child].is_base
    ]


def _no_stacking(g: SceneGraph) -> bool:
    return not _movable_on_movable(g)


def _same_container(g: SceneGraph) -> bool:
    movables = [
        i for i in g.movable_ids() if not g.nodes[i].is_container
    ]
    if not movables:
        return False
    parents = set()
    for node_id in movables:
        edge = g.support_parent(node_id)
        if edge is None or edge.kind is not RelationKind.IN:
            return False
        parents.add(edge.parent)
    return len(parents) == 1


def _mix(g: SceneGraph) -> bool:
    return any(
        _category(g, e.parent) != _category(g, e.child) for e in _movable_on_movable(g)
    )


def _separate(g: SceneGraph) -> bool:
    return not _mix(g)


def _keep_bed_clear(g: SceneGraph) -> bool:
    beds = [i for i, n in g.nodes.items() if n.label.lower() == "bed"]
    for e in g.edges:
        if e.kind is RelationKind.ON and e.parent in beds and e.child in g.nodes:
            if _category(g, e.child) != "bedding":
                return False
    return True


_PREDICATES: dict[str, Callable[[SceneGraph], bool]] = {
    "no_stacking": _no_stacking,
    "same_container": _same_container,
    "mix": _mix,
    "separate": _separate,
    "keep_bed_clear": _keep_bed_clear,
}


def preference_predicate(pref_tag: str, goal: SceneGraph) -> bool:
    """Machine-checkable preference satisfaction over a goal graph."""
    try:
        predicate = _PREDICATES[pref_tag]
    except KeyError:
        raise UnknownPreferenceTag(pref_tag) from None
    return predicate(goal)


def preference_tags() -> list[str]:
    return sorted(_PREDICATES)


# --- human adjustment simulation -------------------------------------------------------


def apply_preference_transform(goal: SceneGraph, tag: str) -> SceneGraph | None:
    """Edit a goal graph the way a human applying the preference would.

    Returns None when no deterministic transform is shipped for the tag
    (callers then fall back to instruction injection)."""
    if tag == "no_stacking":
        edited = goal.copy()
        for e in _movable_on_movable(edited):
            root = e.parent
            seen = set()
            while True:
                parent_edge = edited.support_parent(root)
                if parent_edge is None or root in seen:
                    break
                seen.add(root)
                root = parent_edge.parent
            edited.edges = [x for x in edited.edges if x.key() != e.key()]
            edited.edges.append(
                Relation(RelationKind.ON, root, e.child, RelationSource.HUMAN_ADJUSTMENT)
            )
        return edited if edited.edge_keys() != goal.edge_keys() else None
    if tag == "separate":
        edited = goal.copy()
        changed = False
        for e in _movable_on_movable(edited):
            if _category(edited, e.parent) == _category(edited, e.child):
                continue
            base = edited.base_ids()[0] if edited.base_ids() else None
            if base is None:
                continue
            edited.edges = [x for x in edited.edges if x.key() != e.key()]
            edited.edges.append(
                Relation(RelationKind.ON, base, e.child, RelationSource.HUMAN_ADJUSTMENT)
            )
            changed = True
        return edited if changed else None
    if tag == "mix":
        if _mix(goal):
            return None
        edited = goal.copy()
        categories: dict[str, list[str]] = {}
        for node_id in edited.movable_ids():
            categories.setdefault(_category(edited, node_id), []).append(node_id)
        ordered = sorted(categories)
        if len(ordered) < 2:
            return None
        bottom = sorted(categories[ordered[0]])[0]
        top = sorted(categories[ordered[1]])[0]
        edited.edges = [
            x for x in edited.edges
            if not (x.kind in (RelationKind.ON, RelationKind.IN) and x.child == top)
        ]
        edited.edges.append(
            Relation(RelationKind.ON, bottom, top, RelationSource.HUMAN_ADJUSTMENT)
        )
        return edited
    return None


# --- scoring ---------------------------------------------------------------------------

METRICS = ("stability", "area", "length", "feasibility", "pref_learn", "pref_apply")


@dataclass
class MetricReport:
    raw: dict[str, float]
    normalized: dict[str, float]
    batch_size: int
    batch_ranges: dict[str, tuple[float, float]]
    subjective: float | None = None  # manually collected scores, never generated

    def to_dict(self) -> dict[str, Any]:
        return {
            "raw": dict(self.raw),
            "normalized": dict(self.normalized),
            "batch_size": self.batch_size,
            "batch_ranges": {k: list(v) for k, v in self.batch_ranges.items()},
            "subjective": self.subjective,
        }


def min_max_normalize(values: Sequence[float]) -> list[float]:
    """Map raw values to [0, 10]; a degenerate range maps to the midpoint."""
    if not values:
        raise EmptyBatch("normalization needs at least one value")
    lo, hi = min(values), max(values)
    if hi == lo:
        return [5.0 for _ in values]
    return [10.0 * (v - lo) / (hi - lo) for v in values]


def compute_raw_metrics(
    initial: SceneGraph,
    plan: Plan | None,
    outcome: ExecutionOutcome | None,
    solution: PoseSolution | None,
    learned_pref: str,
    ground_truth_pref: str,
    pref_tag: str,
    pref_apply_goal: SceneGraph | None = None,
    embedder=None,
) -> dict[str, float]:
    """Raw metric values for one benchmark run."""
    raw: dict[str, float] = {}
    if solution is not None:
        raw["stability"] = solution.breakdown.stability_cost
        raw["area"] = solution.breakdown.area
    raw["length"] = float(len(plan.steps)) if plan is not None else 0.0
    feasible = bool(
        outcome is not None and outcome.ok and solution is not None and solution.feasible
    )
    raw["feasibility"] = 1.0 if feasible else 0.0
    if learned_pref and ground_truth_pref:
        raw["pref_learn"] = similarity(learned_pref, ground_truth_pref, embedder)
    else:
        raw["pref_learn"] = 0.0
    apply_goal = pref_apply_goal if pref_apply_goal is not None else (plan.goal if plan else None)
    if apply_goal is not None:
        raw["pref_apply"] = 1.0 if preference_predicate(pref_tag, apply_goal) else 0.0
    else:
        raw["pref_apply"] = 0.0
    return raw


def score(
    initial: SceneGraph,
    plan: Plan | None,
    outcome: ExecutionOutcome | None,
    solution: PoseSolution | None,
    learned_pref: str,
    ground_truth_pref: str,
    batch: Sequence[Mapping[str, float]],
    pref_tag: str = "no_stacking",
    pref_apply_goal: SceneGraph | None = None,
    embedder=None,
) -> MetricReport:
    """Score one run against its batch; ``batch`` must contain the raw metric
    maps of every run in the batch, this one included."""
    if not batch:
        raise EmptyBatch("scoring needs a non-empty normalization batch")
    raw = compute_raw_metrics(
        initial, plan, outcome, solution, learned_pref, ground_truth_pref,
        pref_tag, pref_apply_goal, embedder,
    )
    normalized: dict[str, float] = {}
    ranges: dict[str, tuple[float, float]] = {}
    for metric in METRICS:
        values = [float(peer[metric]) for peer in batch if metric in peer]
        if metric not in raw or not values:
            continue
        lo, hi = min(values), max(values)
        ranges[metric] = (lo, hi)
        if hi == lo:
            normalized[metric] = 5.0
        else:
            clipped = min(max(raw[metric], lo), hi)
            normalized[metric] = 10.0 * (clipped - lo) / (hi - lo)
    return MetricReport(
        raw=raw, normalized=normalized, batch_size=len(batch), batch_ranges=ranges
    )


def config_hash(config: Mapping[str, Any]) -> str:
    return hashlib.sha256(canonical_dumps(dict(config)).encode("utf-8")).hexdigest()[:16]


# --- batch pipeline ---------------------------------------------------------------------


def run_benchmark(
    spec: ScenarioSpec,
    runs: int,
    synthesis_cfg,
    backend,
    embedder=None,
) -> dict[str, Any]:
    """Sample, plan, simulate the human, replan, synthesize, and score a batch.

    The human is simulated by editing each first-pass goal per the ground
    truth preference (when a transform is shipped) so the learned record
    comes from adjustment summarization; otherwise the ground-truth text is
    injected as an instruction.  ``pref_apply`` is evaluated on a held-out
    scenario planned with the learned preferences.
    """
    from .preferences import PreferenceStore
    from .synthesis import synthesize_scene

    run_rows: list[dict[str, Any]] = []
    raws: list[dict[str, float]] = []
    for index in range(runs):
        scenario = sample_scenario(replace(spec, seed=spec.seed + index))
        store = PreferenceStore()

        first_plan = plan_task(scenario.scene, scenario.instruction, backend)
        adjusted = apply_preference_transform(first_plan.goal, scenario.preference_tag)
        if adjusted is not None:
            changes = first_plan.goal.diff(adjusted)
            learned = store.extract_from_adjustment(changes, backend, scene=first_plan.goal)
        else:
            learned = store.ingest_instruction(scenario.preference_text)

        plan = plan_task(
            scenario.scene, scenario.instruction, backend, prefs=store.prompt_records()
        )
        outcome = execute_symbolically(scenario.scene, plan)
        solution = None
        if outcome.ok:
            from .session import surface_for

            surface = surface_for(plan.goal, fallback=scenario.surface_id)
            # a stochastic optimizer gets fresh restarts like the live loop does
            for attempt in range(3):
                cfg = replace(
                    synthesis_cfg,
                    seed=synthesis_cfg.seed + index + 100_003 * attempt,
                )
                try:
                    solution = synthesize_scene(plan.goal, surface, cfg)
                except TidyloopError:
                    solution = None
                    break
                if solution.feasible:
                    break

        held_out = sample_scenario(replace(spec, seed=spec.seed + index + 10_000))
        held_plan = plan_task(
            held_out.scene, held_out.instruction, backend, prefs=store.prompt_records()
        )

        raw = compute_raw_metrics(
            scenario.scene,
            plan,
            outcome,
            solution,
            learned.text,
            scenario.preference_text,
            scenario.preference_tag,
            pref_apply_goal=held_plan.goal,
            embedder=embedder,
        )
        raws.append(raw)
        run_rows.append(
            {
                "seed": spec.seed + index,
                "object_count": len(scenario.scene.movable_ids()),
                "preference_tag": scenario.preference_tag,
                "learned_preference": learned.text,
                "outcome_ok": outcome.ok,
                "feasible": bool(solution.feasible) if solution else False,
                "raw": raw,
            }
        )

    ranges: dict[str, tuple[float, float]] = {}
    for metric in METRICS:
        values = [r[metric] for r in raws if metric in r]
        if values:
            ranges[metric] = (min(values), max(values))
    for row in run_rows:
        normalized = {}
        for metric, (lo, hi) in ranges.items():
            if metric not in row["raw"]:
                continue
            if hi == lo:
                normalized[metric] = 5.0
            else:
                normalized[metric] = 10.0 * (row["raw"][metric] - lo) / (hi - lo)
        row["normalized"] = normalized

    aggregates = {
        metric: sum(r[metric] for r in raws if metric in r) / max(1, len([r for r in raws if metric in r]))
        for metric in METRICS
    }
    return {
        "spec": spec.to_dict(),
        "config_hash": config_hash(
            {"spec": spec.to_dict(), "synthesis": synthesis_cfg.to_dict(), "runs": runs}
        ),
        "runs": run_rows,
        "batch_ranges": {k: list(v) for k, v in ranges.items()},
        "aggregates": aggregates,
    }
