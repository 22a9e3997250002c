"""Bottom-up stochastic pose synthesizer.

Poses are optimized per group by simulated annealing over (x, y, yaw) of
one object at a time; groups are then reduced to composite boxes whose
global placement over the support surface is optimized by the same
annealer, and the results are rigidly mapped back to the member objects.

Stacked objects ride with their support parent and keep their z derived
from the stack, so the search space stays planar.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

import numpy as np

from . import objectives
from .errors import RegionTooSmall, SceneGraphError
from .events import EventKind, EventOrigin, FeedbackEvent
from .geometry import (
    COLLISION_AREA_TOLERANCE,
    DEFAULT_SUPPORT_MARGIN_FRACTION,
    Footprint,
    contains,
    collides,
    overlap_area_raw,
    supports,
)
from .objectives import ObjectiveBreakdown, ObjectiveWeights
from .scene import (
    GroupDag,
    ObjectNode,
    Pose,
    RelationKind,
    SceneGraph,
    SUPPORT_KINDS,
    ORIENTATION_KINDS,
)

# Soft-constraint shaping for near/orientation relations.
RELATION_WEIGHT = 10.0
NEAR_GAP = 0.05
ORIENTATION_MARGIN = 0.02
# Steering-only collision shaping inside the annealer: the raw overlap
# volume of centimetre-scale (or very flat) objects is tiny, so the
# compactness terms would happily pay for interpenetration.  Each colliding
# pair therefore also contributes a fixed offset plus the dimensionless
# overlap fraction of the smaller footprint, which makes full overlap cost
# w_collision regardless of object scale.  Reported breakdowns contain the
# pure overlap volume only.
COLLISION_PAIR_OFFSET = 0.02

_HALF_PI = 0.5 * math.pi


@dataclass
class SynthesisConfig:
    seed: int = 0
    iterations_per_group: int = 2000
    initial_temperature: float = 1.0
    cooling_rate: float = 0.995
    proposal_sigma_xy: float = 0.05
    proposal_sigma_yaw: float = 0.15
    restarts: int = 4
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)

    def __post_init__(self) -> None:
        if self.iterations_per_group <= 0:
            raise ValueError("iterations_per_group must be positive")
        if not 0.0 < self.cooling_rate < 1.0:
            raise ValueError("cooling_rate must lie in (0, 1)")
        if self.proposal_sigma_xy <= 0.0 or self.proposal_sigma_yaw <= 0.0:
            raise ValueError("proposal sigmas must be positive")
        if self.restarts <= 0:
            raise ValueError("restarts must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "iterations_per_group": self.iterations_per_group,
            "initial_temperature": self.initial_temperature,
            "cooling_rate": self.cooling_rate,
            "proposal_sigma_xy": self.proposal_sigma_xy,
            "proposal_sigma_yaw": self.proposal_sigma_yaw,
            "restarts": self.restarts,
            "weights": self.weights.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SynthesisConfig":
        data = dict(data)
        weights = data.pop("weights", None)
        cfg = cls(**data) if not weights else cls(
            **data, weights=ObjectiveWeights.from_dict(weights)
        )
        return cfg


@dataclass
class PoseSolution:
    """Synthesized world poses plus their objective breakdown and feasibility."""

    poses: dict[str, Pose]
    breakdown: ObjectiveBreakdown
    feasible: bool
    feedback: list[FeedbackEvent] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "poses": {i: p.to_dict() for i, p in sorted(self.poses.items())},
            "breakdown": self.breakdown.to_dict(),
            "feasible": self.feasible,
            "feedback": [e.to_dict() for e in self.feedback],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PoseSolution":
        breakdown = ObjectiveBreakdown(**data["breakdown"])
        return cls(
            poses={i: Pose.from_dict(p) for i, p in data["poses"].items()},
            breakdown=breakdown,
            feasible=bool(data["feasible"]),
            feedback=[FeedbackEvent.from_dict(e) for e in data.get("feedback", [])],
        )


class _BoxWorld:
    """Mutable box layout in a region-local frame (region centre at origin)."""

    def __init__(
        self,
        ids: list[str],
        half_extents: list[tuple[float, float, float]],
        masses: list[float],
        parents: list[int],              # -1 for roots
        in_parent: list[bool],           # True if the support edge is 'in'
        region_he: tuple[float, float],
        hinges: list[tuple[str, int, int]],  # (kind, parent_idx, child_idx)
        exempt_pairs: set[frozenset[int]],
    ):
        self.ids = ids
        self.n = len(ids)
        self.hx = [he[0] for he in half_extents]
        self.hy = [he[1] for he in half_extents]
        self.hz = [he[2] for he in half_extents]
        self.mass = masses
        self.parents = parents
        self.in_parent = in_parent
        self.region_he = region_he
        self.hinges = hinges

        self.children: list[list[int]] = [[] for _ in range(self.n)]
        for i, p in enumerate(parents):
            if p >= 0:
                self.children[p].append(i)
        self.subtrees = [self._collect_subtree(i) for i in range(self.n)]

        # depth levels from the stack structure
        depth = [0] * self.n
        order = self._topological_order()
        for i in order:
            if parents[i] >= 0:
                depth[i] = depth[parents[i]] + 1
        level_map: dict[int, list[int]] = {}
        for i, d in enumerate(depth):
            level_map.setdefault(d, []).append(i)
        self.levels = [level_map[d] for d in sorted(level_map)]

        # derived z (bottom face) per box: 'on' stacks on the parent top,
        # 'in' rests on the container floor
        self.z = [0.0] * self.n
        for i in order:
            p = parents[i]
            if p < 0:
                self.z[i] = 0.0
            elif in_parent[i]:
                self.z[i] = self.z[p]
            else:
                self.z[i] = self.z[p] + 2.0 * self.hz[p]

        # collision candidates: non-exempt pairs whose static z-intervals
        # overlap, annotated with the squared reach for a cheap inline reject
        self.collision_pairs: list[tuple[int, int, float, float]] = []
        for i in range(self.n):
            for j in range(i + 1, self.n):
                if frozenset((i, j)) in exempt_pairs:
                    continue
                z_overlap = min(
                    self.z[i] + 2.0 * self.hz[i], self.z[j] + 2.0 * self.hz[j]
                ) - max(self.z[i], self.z[j])
                if z_overlap <= 0.0:
                    continue
                reach = math.hypot(self.hx[i], self.hy[i]) + math.hypot(self.hx[j], self.hy[j])
                self.collision_pairs.append((i, j, z_overlap, reach * reach))

        self.multi_levels = [lvl for lvl in self.levels if len(lvl) > 1]
        self.level_pairs = [
            (lvl[a], lvl[b])
            for lvl in self.multi_levels
            for a in range(len(lvl))
            for b in range(a + 1, len(lvl))
        ]

        self.x = [0.0] * self.n
        self.y = [0.0] * self.n
        self.yaw = [0.0] * self.n
        self.angles = [
            objectives.main_axis_angle(self.hx[i], self.hy[i], 0.0) for i in range(self.n)
        ]

    def _collect_subtree(self, root: int) -> list[int]:
        out = [root]
        stack = [root]
        while stack:
            for child in self.children[stack.pop()]:
                out.append(child)
                stack.append(child)
        return out

    def _topological_order(self) -> list[int]:
        order = [i for i, p in enumerate(self.parents) if p < 0]
        cursor = 0
        while cursor < len(order):
            order.extend(self.children[order[cursor]])
            cursor += 1
        if len(order) != self.n:
            raise SceneGraphError("support edges within a group form a cycle")
        return order

    # -- initialization -----------------------------------------------------

    def grid_scatter(self) -> None:
        """Deterministic collision-light start: roots on a grid, stacks centred."""
        roots = [i for i, p in enumerate(self.parents) if p < 0]
        cols = math.ceil(math.sqrt(len(roots)))
        rows = math.ceil(len(roots) / cols)
        rx, ry = self.region_he
        for idx, i in enumerate(roots):
            col, row = idx % cols, idx // cols
            self.x[i] = -rx + (col + 0.5) * (2.0 * rx / cols)
            self.y[i] = -ry + (row + 0.5) * (2.0 * ry / rows)
            self.yaw[i] = 0.0 if (self.hx[i] <= rx and self.hy[i] <= ry) else _HALF_PI
            lim_x, lim_y = self._root_limits(i, self.yaw[i])
            self.x[i] = min(max(self.x[i], -lim_x), lim_x)
            self.y[i] = min(max(self.y[i], -lim_y), lim_y)
        for i in self._topological_order():
            p = self.parents[i]
            if p >= 0:
                self.x[i] = self.x[p]
                self.y[i] = self.y[p]
                self.yaw[i] = 0.0
                if self.in_parent[i] and (self.hx[i] > self.hx[p] or self.hy[i] > self.hy[p]):
                    self.yaw[i] = self.yaw[p] + _HALF_PI  # only the rotated orientation fits
        for i in range(self.n):
            self.angles[i] = objectives.main_axis_angle(self.hx[i], self.hy[i], self.yaw[i])

    # -- constraint regions ---------------------------------------------------

    def _root_limits(self, i: int, yaw: float) -> tuple[float, float]:
        c, s = abs(math.cos(yaw)), abs(math.sin(yaw))
        ax = self.hx[i] * c + self.hy[i] * s
        ay = self.hx[i] * s + self.hy[i] * c
        return self.region_he[0] - ax, self.region_he[1] - ay

    def _clamp_member(self, i: int, cx: float, cy: float, yaw: float) -> tuple[float, float] | None:
        """Clamp a proposed centre for member i; None rejects the proposal."""
        p = self.parents[i]
        if p < 0:
            lim_x, lim_y = self._root_limits(i, yaw)
            if lim_x < 0.0 or lim_y < 0.0:
                return None  # this yaw cannot fit in the region
            return (min(max(cx, -lim_x), lim_x), min(max(cy, -lim_y), lim_y))
        # express the centre in the parent's rotated frame
        dx, dy = cx - self.x[p], cy - self.y[p]
        cth, sth = math.cos(self.yaw[p]), math.sin(self.yaw[p])
        lx = dx * cth + dy * sth
        ly = -dx * sth + dy * cth
        if self.in_parent[i]:
            # contained: the child's rotated box must stay inside the parent
            rel_yaw = yaw - self.yaw[p]
            c, s = abs(math.cos(rel_yaw)), abs(math.sin(rel_yaw))
            ax = self.hx[i] * c + self.hy[i] * s
            ay = self.hx[i] * s + self.hy[i] * c
            lim_x = self.hx[p] - ax
            lim_y = self.hy[p] - ay
            if lim_x < 0.0 or lim_y < 0.0:
                return None  # this yaw cannot fit inside the container
        else:
            shrink = DEFAULT_SUPPORT_MARGIN_FRACTION * min(
                self.hx[p], self.hy[p], self.hx[i], self.hy[i]
            )
            lim_x = max(self.hx[p] - shrink, 0.0)
            lim_y = max(self.hy[p] - shrink, 0.0)
        lx = min(max(lx, -lim_x), lim_x)
        ly = min(max(ly, -lim_y), lim_y)
        return (
            self.x[p] + lx * cth - ly * sth,
            self.y[p] + lx * sth + ly * cth,
        )

    # -- proposals ------------------------------------------------------------

    def propose(self, i: int, dx: float, dy: float, dyaw: float):
        """Rigidly move/rotate member i's subtree; returns an undo record or
        None when the move is rejected outright (root rotated out of fit)."""
        subtree = self.subtrees[i]
        undo = [(j, self.x[j], self.y[j], self.yaw[j], self.angles[j]) for j in subtree]
        target = self._clamp_member(i, self.x[i] + dx, self.y[i] + dy, self.yaw[i] + dyaw)
        if target is None:
            return None
        pivot_x, pivot_y = self.x[i], self.y[i]
        shift_x, shift_y = target[0] - pivot_x, target[1] - pivot_y
        if dyaw != 0.0:
            c, s = math.cos(dyaw), math.sin(dyaw)
            for j in subtree:
                ox, oy = self.x[j] - pivot_x, self.y[j] - pivot_y
                self.x[j] = pivot_x + ox * c - oy * s + shift_x
                self.y[j] = pivot_y + ox * s + oy * c + shift_y
                self.yaw[j] += dyaw
                self.angles[j] = objectives.main_axis_angle(self.hx[j], self.hy[j], self.yaw[j])
        else:
            for j in subtree:
                self.x[j] += shift_x
                self.y[j] += shift_y
        return undo

    def apply_undo(self, undo) -> None:
        for j, ox, oy, oyaw, oangle in undo:
            self.x[j], self.y[j], self.yaw[j], self.angles[j] = ox, oy, oyaw, oangle

    def world_z(self, plane_z: float) -> list[float]:
        """Stack heights re-derived from ``plane_z`` in world floats, so a
        child's bottom equals its parent's top bit-for-bit."""
        out = [0.0] * self.n
        for i in self._topological_order():
            p = self.parents[i]
            if p < 0:
                out[i] = plane_z
            elif self.in_parent[i]:
                out[i] = out[p]
            else:
                out[i] = out[p] + 2.0 * self.hz[p]
        return out

    def snapshot(self) -> tuple[list[float], list[float], list[float]]:
        return (self.x[:], self.y[:], self.yaw[:])

    def restore(self, snap) -> None:
        self.x, self.y, self.yaw = snap[0][:], snap[1][:], snap[2][:]
        for i in range(self.n):
            self.angles[i] = objectives.main_axis_angle(self.hx[i], self.hy[i], self.yaw[i])

    # -- cost -------------------------------------------------------------------

    def cost_components(self) -> ObjectiveBreakdown:
        """Pure objective components at the current state (reporting path)."""
        x, y, z, yaw = self.x, self.y, self.z, self.yaw
        hx, hy = self.hx, self.hy

        manhattan = 0.0
        for i, j in self.level_pairs:
            manhattan += abs(x[i] - x[j]) + abs(y[i] - y[j]) + abs(z[i] - z[j])
        area = manhattan
        for level in self.multi_levels:
            xs = [x[i] for i in level]
            ys = [y[i] for i in level]
            area += (max(xs) - min(xs)) * (max(ys) - min(ys))

        if self.n:
            mean = sum(self.angles) / self.n
            orth = sum((a - mean) ** 2 for a in self.angles) / self.n
        else:
            orth = 0.0

        collision = 0.0
        for i, j, z_overlap, reach2 in self.collision_pairs:
            dx, dy = x[i] - x[j], y[i] - y[j]
            if dx * dx + dy * dy > reach2:
                continue
            overlap = overlap_area_raw(
                x[i], y[i], hx[i], hy[i], yaw[i],
                x[j], y[j], hx[j], hy[j], yaw[j],
            )
            if overlap > COLLISION_AREA_TOLERANCE:
                collision += overlap * z_overlap

        total_mass = 0.0
        norms = 0.0
        sx = sy = 0.0
        for i in range(self.n):
            m = self.mass[i]
            total_mass += m
            norms += m * math.hypot(x[i], y[i])
            sx += m * x[i]
            sy += m * y[i]
        stability = (norms + math.hypot(sx, sy)) / total_mass if total_mass else 0.0

        return ObjectiveBreakdown(
            manhattan=manhattan,
            area=area,
            orth=orth,
            collision_penalty=collision,
            stability_cost=stability,
        )

    def relation_penalty(self) -> float:
        if not self.hinges:
            return 0.0
        total = 0.0
        x, y = self.x, self.y
        for kind, i, j in self.hinges:
            if kind == "near":
                threshold = (
                    math.hypot(self.hx[i], self.hy[i])
                    + math.hypot(self.hx[j], self.hy[j])
                    + NEAR_GAP
                )
                total += max(0.0, math.hypot(x[i] - x[j], y[i] - y[j]) - threshold)
            elif kind == "left_of":
                total += max(0.0, x[j] - x[i] + ORIENTATION_MARGIN)
            elif kind == "right_of":
                total += max(0.0, x[i] - x[j] + ORIENTATION_MARGIN)
            elif kind == "front_of":
                total += max(0.0, y[j] - y[i] + ORIENTATION_MARGIN)
            elif kind == "behind":
                total += max(0.0, y[i] - y[j] + ORIENTATION_MARGIN)
        return RELATION_WEIGHT * total

    def cost(self, weights: ObjectiveWeights) -> float:
        """Steering cost for the annealer: weighted components plus a fixed
        offset per colliding pair (see COLLISION_PAIR_OFFSET) and the soft
        relation penalties."""
        x, y, z, yaw = self.x, self.y, self.z, self.yaw
        hx, hy = self.hx, self.hy
        angles = self.angles
        n = self.n

        manhattan = 0.0
        for i, j in self.level_pairs:
            manhattan += abs(x[i] - x[j]) + abs(y[i] - y[j]) + abs(z[i] - z[j])
        area = manhattan
        for level in self.multi_levels:
            first = level[0]
            min_x = max_x = x[first]
            min_y = max_y = y[first]
            for i in level[1:]:
                xi, yi = x[i], y[i]
                if xi < min_x:
                    min_x = xi
                elif xi > max_x:
                    max_x = xi
                if yi < min_y:
                    min_y = yi
                elif yi > max_y:
                    max_y = yi
            area += (max_x - min_x) * (max_y - min_y)

        if n:
            mean = 0.0
            for a in angles:
                mean += a
            mean /= n
            orth = 0.0
            for a in angles:
                d = a - mean
                orth += d * d
            orth /= n
        else:
            orth = 0.0

        collision = 0.0
        steering_collision = 0.0
        for i, j, z_overlap, reach2 in self.collision_pairs:
            dx = x[i] - x[j]
            dy = y[i] - y[j]
            if dx * dx + dy * dy > reach2:
                continue
            overlap = overlap_area_raw(
                x[i], y[i], hx[i], hy[i], yaw[i],
                x[j], y[j], hx[j], hy[j], yaw[j],
            )
            if overlap > COLLISION_AREA_TOLERANCE:
                collision += overlap * z_overlap
                smaller = 4.0 * min(hx[i] * hy[i], hx[j] * hy[j])
                steering_collision += COLLISION_PAIR_OFFSET + overlap / smaller

        total_mass = 0.0
        norms = 0.0
        sx = sy = 0.0
        mass = self.mass
        for i in range(n):
            m = mass[i]
            total_mass += m
            norms += m * math.hypot(x[i], y[i])
            sx += m * x[i]
            sy += m * y[i]
        stability = (norms + math.hypot(sx, sy)) / total_mass if total_mass else 0.0

        return (
            weights.manhattan * manhattan
            + weights.area * area
            + weights.orth * orth
            + weights.collision * (collision + steering_collision)
            + weights.stability * stability
            + self.relation_penalty()
        )


def _anneal(
    world: _BoxWorld,
    cfg: SynthesisConfig,
    rng: np.random.Generator,
    trace: list[float] | None = None,
) -> tuple[tuple[list[float], list[float], list[float]], float]:
    """One simulated-annealing run; returns the best state seen and its cost."""
    weights = cfg.weights
    temperature = cfg.initial_temperature
    current = world.cost(weights)
    best_cost = current
    best_state = world.snapshot()
    n = world.n
    for _ in range(cfg.iterations_per_group):
        i = int(rng.integers(n))
        scale = max(math.sqrt(temperature), 0.05)
        dx = float(rng.normal(0.0, cfg.proposal_sigma_xy * scale))
        dy = float(rng.normal(0.0, cfg.proposal_sigma_xy * scale))
        dyaw = float(rng.normal(0.0, cfg.proposal_sigma_yaw * scale))
        undo = world.propose(i, dx, dy, dyaw)
        if undo is not None:
            candidate = world.cost(weights)
            delta = candidate - current
            if delta <= 0.0 or rng.random() < math.exp(-delta / max(temperature, 1e-12)):
                current = candidate
                if candidate < best_cost:
                    best_cost = candidate
                    best_state = world.snapshot()
            else:
                world.apply_undo(undo)
        temperature *= cfg.cooling_rate
        if trace is not None:
            trace.append(best_cost)
    return best_state, best_cost


def _best_of_restarts(
    world: _BoxWorld, cfg: SynthesisConfig, seed_path: tuple[int, ...]
) -> tuple[list[float], list[float], list[float]]:
    best_state = None
    best_cost = math.inf
    for restart in range(cfg.restarts):
        world.grid_scatter()
        rng = np.random.default_rng(np.random.SeedSequence(seed_path + (restart,)))
        state, cost = _anneal(world, cfg, rng)
        if cost < best_cost:
            best_cost = cost
            best_state = state
    assert best_state is not None
    world.restore(best_state)
    return best_state


# -- public synthesis ---------------------------------------------------------


def _build_group_world(
    group: GroupDag,
    nodes: Mapping[str, ObjectNode],
    region_he: tuple[float, float],
) -> _BoxWorld:
    members = list(group.member_ids)
    index = {m: k for k, m in enumerate(members)}
    parents = [-1] * len(members)
    in_parent = [False] * len(members)
    hinges: list[tuple[str, int, int]] = []
    for e in group.intra_edges:
        if e.parent not in index or e.child not in index:
            continue
        if e.kind in SUPPORT_KINDS:
            parents[index[e.child]] = index[e.parent]
            in_parent[index[e.child]] = e.kind is RelationKind.IN
        elif e.kind is RelationKind.NEAR or e.kind in ORIENTATION_KINDS:
            hinges.append((e.kind.value, index[e.parent], index[e.child]))
    exempt: set[frozenset[int]] = set()
    for k, p in enumerate(parents):
        if p >= 0 and in_parent[k]:
            # container overlaps with everything inside it
            stack = [k]
            while stack:
                current = stack.pop()
                exempt.add(frozenset((p, current)))
                stack.extend(
                    c for c, cp in enumerate(parents) if cp == current
                )
    return _BoxWorld(
        ids=members,
        half_extents=[nodes[m].half_extents for m in members],
        masses=[nodes[m].mass for m in members],
        parents=parents,
        in_parent=in_parent,
        region_he=region_he,
        hinges=hinges,
        exempt_pairs=exempt,
    )


def _check_region_fit(world: _BoxWorld, region_he: tuple[float, float]) -> None:
    rx, ry = region_he
    for i, parent in enumerate(world.parents):
        if parent >= 0:
            continue
        fits_straight = world.hx[i] <= rx and world.hy[i] <= ry
        fits_rotated = world.hy[i] <= rx and world.hx[i] <= ry
        if not (fits_straight or fits_rotated):
            raise RegionTooSmall(
                f"member {world.ids[i]!r} footprint {2*world.hx[i]:.3f}x{2*world.hy[i]:.3f} m "
                f"cannot fit region {2*rx:.3f}x{2*ry:.3f} m"
            )


def _group_local_solution(
    group: GroupDag,
    nodes: Mapping[str, ObjectNode],
    region_he: tuple[float, float],
    cfg: SynthesisConfig,
    group_ordinal: int,
) -> _BoxWorld:
    world = _build_group_world(group, nodes, region_he)
    _check_region_fit(world, region_he)
    _best_of_restarts(world, cfg, (cfg.seed, group_ordinal))
    return world


def _local_to_world(
    world: _BoxWorld, center: tuple[float, float], yaw: float, surface_z: float
) -> dict[str, Pose]:
    c, s = math.cos(yaw), math.sin(yaw)
    z = world.world_z(surface_z)
    out: dict[str, Pose] = {}
    for k, member in enumerate(world.ids):
        wx = world.x[k] * c - world.y[k] * s + center[0]
        wy = world.x[k] * s + world.y[k] * c + center[1]
        out[member] = Pose((wx, wy, z[k]), world.yaw[k] + yaw)
    return out


def group_breakdown(
    group: GroupDag,
    nodes: Mapping[str, ObjectNode],
    poses: Mapping[str, Pose],
    weights: ObjectiveWeights,
    ref_xy: tuple[float, float],
) -> ObjectiveBreakdown:
    """Objective components of a group layout, recomputable from world poses.

    Stability is taken about the placement region's centre since a lone
    group has no base object.
    """
    sub = SceneGraph(
        nodes=[nodes[m].copy() for m in group.member_ids],
        edges=[e for e in group.intra_edges],
    ).with_poses({m: poses[m] for m in group.member_ids})
    breakdown = ObjectiveBreakdown(
        manhattan=objectives.manhattan_loss(sub),
        area=objectives.area_loss(sub),
        orth=objectives.orthogonality_loss(sub),
        collision_penalty=objectives.collision_penalty(sub),
        stability_cost=objectives.stability_about_point(sub, ref_xy, group.member_ids),
    )
    breakdown.total = (
        weights.manhattan * breakdown.manhattan
        + weights.area * breakdown.area
        + weights.orth * breakdown.orth
        + weights.collision * breakdown.collision_penalty
        + weights.stability * breakdown.stability_cost
    )
    return breakdown


def synthesize_group(
    group: GroupDag,
    region: Footprint,
    cfg: SynthesisConfig,
    nodes: Mapping[str, ObjectNode],
    surface_z: float = 0.0,
    group_ordinal: int = 0,
) -> PoseSolution:
    """Optimize poses for one group inside a placement region.

    Deterministic for a fixed (scene, config, seed); the best state across
    all annealing restarts is returned.
    """
    world = _group_local_solution(group, nodes, region.half_extents, cfg, group_ordinal)
    poses = _local_to_world(world, region.center, region.yaw, surface_z)
    breakdown = group_breakdown(group, nodes, poses, cfg.weights, region.center)
    sub = SceneGraph(
        nodes=[nodes[m].copy() for m in group.member_ids],
        edges=list(group.intra_edges),
    ).with_poses(poses)
    feedback = feasibility_report(sub)
    return PoseSolution(
        poses=poses,
        breakdown=breakdown,
        feasible=not feedback,
        feedback=feedback,
    )


def _group_canvas(
    group: GroupDag,
    nodes: Mapping[str, ObjectNode],
    surface_he: tuple[float, float],
    share: float,
) -> tuple[float, float]:
    """Working-canvas half extents for one group's local optimization."""
    spread = math.sqrt(max(share, 1e-9)) * 1.2
    need_x = need_y = 0.0
    for member in group.member_ids:
        hx, hy, _ = nodes[member].half_extents
        lo, hi = sorted((hx, hy))
        # the member must fit in at least one orientation, with 10% slack
        need_x = max(need_x, lo * 1.1)
        need_y = max(need_y, lo * 1.1)
        need_x = max(need_x, min(hi * 1.1, surface_he[0]))
        need_y = max(need_y, min(hi * 1.1, surface_he[1]))
    return (
        min(max(surface_he[0] * spread, need_x), surface_he[0]),
        min(max(surface_he[1] * spread, need_y), surface_he[1]),
    )


def _lifted_hinges(
    g: SceneGraph, group_of: Mapping[str, int]
) -> list[tuple[str, int, int]]:
    """Cross-group near/orientation edges become composite constraints."""
    hinges: list[tuple[str, int, int]] = []
    seen: set[tuple[str, int, int]] = set()
    for e in g.edges:
        if e.kind not in ORIENTATION_KINDS and e.kind is not RelationKind.NEAR:
            continue
        gi = group_of.get(e.parent)
        gj = group_of.get(e.child)
        if gi is None or gj is None or gi == gj:
            continue
        entry = (e.kind.value, gi, gj)
        if entry not in seen:
            seen.add(entry)
            hinges.append(entry)
    return hinges


def _member_base(g: SceneGraph, member: str, fallback: str) -> str:
    """The base object a member's support chain bottoms out on."""
    current = member
    for _ in range(len(g.nodes) + 1):
        edge = g.support_parent(current)
        if edge is None or edge.parent not in g.nodes:
            return fallback
        if g.nodes[edge.parent].is_base:
            return edge.parent
        current = edge.parent
    return fallback


def _synthesis_groups(g: SceneGraph, fallback_base: str) -> list[tuple[GroupDag, str]]:
    """Working groups for the synthesizer, paired with their support base.

    Category groups are split per base (a category resting partly on the
    table and partly in the cart is two placement problems) and merged
    along cross-group support edges: a container and its contents, or a
    cross-category stack, must be optimized in one local world.  Intra
    edges are rebuilt from the goal graph.  Support-linked members always
    share a base, so merging never crosses the base split."""
    if not g.groups:
        raise SceneGraphError("scene has no groups to synthesize")
    base_of_member: dict[str, str] = {}
    subgroups: dict[tuple[str, str], list[str]] = {}
    for group in g.groups:
        for member in group.member_ids:
            base = _member_base(g, member, fallback_base)
            base_of_member[member] = base
            subgroups.setdefault((group.category, base), []).append(member)

    keys = sorted(subgroups)
    index_of: dict[str, int] = {}
    for k, key in enumerate(keys):
        for member in subgroups[key]:
            index_of[member] = k

    parent = list(range(len(keys)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for e in g.edges:
        if e.kind not in SUPPORT_KINDS:
            continue
        gi = index_of.get(e.parent)
        gj = index_of.get(e.child)
        if gi is None or gj is None or find(gi) == find(gj):
            continue
        parent[find(gi)] = find(gj)

    merged: dict[int, list[int]] = {}
    for k in range(len(keys)):
        merged.setdefault(find(k), []).append(k)

    clusters: list[tuple[list[str], list[str]]] = []  # (categories, members) per base key
    by_base: dict[str, list[tuple[list[str], list[str]]]] = {}
    for indices in merged.values():
        categories = sorted({keys[i][0] for i in indices})
        base = keys[indices[0]][1]
        members = sorted(m for i in indices for m in subgroups[keys[i]])
        by_base.setdefault(base, []).append((categories, members))

    out: list[tuple[GroupDag, str]] = []
    for base, entries in by_base.items():
        base_node = g.nodes.get(base)
        if base_node is not None and base_node.is_container:
            # one shared interior: everything inside a base container is a
            # single packing problem, not a composite of category boxes
            categories = sorted({c for cats, _ in entries for c in cats})
            members = sorted(m for _, ms in entries for m in ms)
            entries = [(categories, members)]
        for categories, members in entries:
            member_set = set(members)
            intra = [
                e for e in g.edges if e.parent in member_set and e.child in member_set
            ]
            out.append(
                (
                    GroupDag(category="+".join(categories), member_ids=members, intra_edges=intra),
                    base,
                )
            )
    out.sort(key=lambda pair: (pair[0].category, pair[1]))
    return out


def _base_plane_z(base: ObjectNode) -> float:
    """Placement plane over a base: its top face, or the interior floor for
    base containers (carts and the like)."""
    if base.is_container:
        return base.pose.position[2]
    return base.top()


def _composite_box(world: _BoxWorld) -> tuple[tuple[float, float], tuple[float, float, float]]:
    """Centre offset and half extents of the minimal axis-aligned enclosure
    of a group world's member footprints."""
    min_x = min_y = math.inf
    max_x = max_y = -math.inf
    top = 0.0
    for k in range(world.n):
        fp = Footprint((world.x[k], world.y[k]), (world.hx[k], world.hy[k]), world.yaw[k])
        for cx, cy in fp.corners():
            min_x, max_x = min(min_x, cx), max(max_x, cx)
            min_y, max_y = min(min_y, cy), max(max_y, cy)
        top = max(top, world.z[k] + 2.0 * world.hz[k])
    return (
        ((min_x + max_x) / 2.0, (min_y + max_y) / 2.0),
        ((max_x - min_x) / 2.0, (max_y - min_y) / 2.0, top / 2.0),
    )


def synthesize_scene(
    g: SceneGraph,
    surface_id: str,
    cfg: SynthesisConfig,
    max_workers: int | None = None,
) -> PoseSolution:
    """Synthesize world poses for every grouped object.

    Category groups linked by support edges are merged into one local
    world; group worlds are optimized concurrently (each owns a seed
    derived from the master seed and its index, so scheduling cannot
    change the result), composed as boxes over their support base, and
    rigidly mapped back.  ``surface_id`` is the fallback base for groups
    the goal graph does not anchor anywhere.
    """
    surface = g.node(surface_id)
    if not surface.is_base:
        raise SceneGraphError(f"surface {surface_id!r} is not a base object")
    if surface.pose is None:
        raise SceneGraphError(f"surface {surface_id!r} has no pose")

    grouped = _synthesis_groups(g, surface_id)
    groups = [pair[0] for pair in grouped]
    group_of: dict[str, int] = {}
    for gi, group in enumerate(groups):
        for member in group.member_ids:
            group_of[member] = gi
    ungrouped = [i for i in g.movable_ids() if i not in group_of]
    if ungrouped:
        raise SceneGraphError(f"movable objects missing from groups: {ungrouped}")

    cohorts: dict[str, list[int]] = {}
    for gi, (_group, base_id) in enumerate(grouped):
        cohorts.setdefault(base_id, []).append(gi)
    for base_id in cohorts:
        base = g.node(base_id)
        if base.pose is None:
            raise SceneGraphError(f"base {base_id!r} has no pose")

    areas = [
        sum(4.0 * g.nodes[m].half_extents[0] * g.nodes[m].half_extents[1] for m in grp.member_ids)
        for grp in groups
    ]
    base_of_group = {gi: base_id for base_id, ids in cohorts.items() for gi in ids}

    def run_group(gi: int) -> _BoxWorld:
        base = g.node(base_of_group[gi])
        cohort = cohorts[base_of_group[gi]]
        cohort_area = sum(areas[i] for i in cohort) or 1.0
        canvas = _group_canvas(
            groups[gi], g.nodes, base.footprint().half_extents, areas[gi] / cohort_area
        )
        return _group_local_solution(groups[gi], g.nodes, canvas, cfg, gi)

    if len(groups) == 1 or max_workers == 1:
        worlds = [run_group(gi) for gi in range(len(groups))]
    else:
        workers = max_workers or min(len(groups), os.cpu_count() or 2)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            worlds = list(pool.map(run_group, range(len(groups))))

    poses: dict[str, Pose] = {}
    all_hinges = _lifted_hinges(g, group_of)
    for base_index, base_id in enumerate(sorted(cohorts)):
        cohort = cohorts[base_id]
        base = g.node(base_id)
        base_fp = base.footprint()
        boxes = [_composite_box(worlds[gi]) for gi in cohort]
        local_index = {gi: pos for pos, gi in enumerate(cohort)}
        composite = _BoxWorld(
            ids=[groups[gi].category for gi in cohort],
            half_extents=[box[1] for box in boxes],
            masses=[sum(g.nodes[m].mass for m in groups[gi].member_ids) for gi in cohort],
            parents=[-1] * len(cohort),
            in_parent=[False] * len(cohort),
            region_he=base_fp.half_extents,
            hinges=[
                (kind, local_index[i], local_index[j])
                for kind, i, j in all_hinges
                if i in local_index and j in local_index
            ],
            exempt_pairs=set(),
        )
        _check_region_fit(composite, base_fp.half_extents)
        # tiling N boxes needs more moves per box than intra-group layout
        composite_cfg = cfg if len(cohort) <= 3 else replace(
            cfg, iterations_per_group=cfg.iterations_per_group + 400 * (len(cohort) - 3)
        )
        _best_of_restarts(composite, composite_cfg, (cfg.seed, len(groups) + base_index))

        plane_z = _base_plane_z(base)
        cth, sth = math.cos(base_fp.yaw), math.sin(base_fp.yaw)
        for pos, gi in enumerate(cohort):
            world = worlds[gi]
            bx, by, byaw = composite.x[pos], composite.y[pos], composite.yaw[pos]
            ox, oy = boxes[pos][0]
            c, s = math.cos(byaw), math.sin(byaw)
            world_z = world.world_z(plane_z)
            for k, member in enumerate(world.ids):
                lx, ly = world.x[k] - ox, world.y[k] - oy
                sx = lx * c - ly * s + bx
                sy = lx * s + ly * c + by
                wx = sx * cth - sy * sth + base_fp.center[0]
                wy = sx * sth + sy * cth + base_fp.center[1]
                poses[member] = Pose(
                    (wx, wy, world_z[k]),
                    world.yaw[k] + byaw + base_fp.yaw,
                )

    placed = g.with_poses(poses)
    breakdown = objectives.total(placed, cfg.weights)
    feedback = feasibility_report(placed)
    solution_poses = dict(poses)
    for base_id in g.base_ids():
        if g.nodes[base_id].pose is not None:
            solution_poses[base_id] = g.nodes[base_id].pose
    return PoseSolution(
        poses=solution_poses,
        breakdown=breakdown,
        feasible=not feedback,
        feedback=feedback,
    )


def feasibility_report(
    g: SceneGraph, poses: Mapping[str, Pose] | None = None
) -> list[FeedbackEvent]:
    """Physical feedback: one event per colliding pair and per violated
    support/containment relation, naming the objects and the source-tagged
    relations involved."""
    placed = g.with_poses(poses) if poses else g
    events: list[FeedbackEvent] = []
    ids = [i for i in sorted(placed.nodes) if placed.nodes[i].pose is not None]
    exempt = placed.containment_exempt_pairs()
    boxes = {i: (placed.nodes[i].footprint(), placed.nodes[i].z_interval()) for i in ids}

    def relations_for(*subjects: str) -> list[dict[str, Any]]:
        return [e.to_dict() for e in placed.relations_incident(subjects)]

    for a_pos in range(len(ids)):
        for b_pos in range(a_pos + 1, len(ids)):
            a, b = ids[a_pos], ids[b_pos]
            if frozenset((a, b)) in exempt:
                continue
            fa, za = boxes[a]
            fb, zb = boxes[b]
            if collides(fa, za, fb, zb):
                events.append(
                    FeedbackEvent(
                        kind=EventKind.COLLISION,
                        origin=EventOrigin.SYNTHESIZER,
                        payload={
                            "objects": [a, b],
                            "relations": relations_for(a, b),
                        },
                    )
                )

    for e in placed.edges:
        if e.kind not in SUPPORT_KINDS:
            continue
        if e.parent not in boxes or e.child not in boxes:
            continue
        fp, zp = boxes[e.parent]
        fc, zc = boxes[e.child]
        if e.kind is RelationKind.ON:
            ok = supports(fp, zp, fc, zc)
        else:
            parent_open = placed.nodes[e.parent].states.get("open", False)
            ok = contains(fp, zp, fc, zc, tolerance=1e-6, require_top=not parent_open)
        if not ok:
            events.append(
                FeedbackEvent(
                    kind=EventKind.COLLAPSE,
                    origin=EventOrigin.SYNTHESIZER,
                    payload={
                        "objects": [e.parent, e.child],
                        "violated": e.to_dict(),
                        "relations": relations_for(e.parent, e.child),
                    },
                )
            )
    return events
