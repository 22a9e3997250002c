"""Cost functions scoring a placed scene, and their weighted combination.

The inter-object spread, footprint-area, axis-alignment, and stability
terms follow the published definitions exactly; collision volume is the
overlap-area-times-depth penalty used by the synthesizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

from .errors import EmptySupportSet, UnplacedNode
from .geometry import (
    COLLISION_AREA_TOLERANCE,
    Z_CONTACT_TOLERANCE,
    footprint_overlap_area,
)
from .scene import ObjectNode, SceneGraph

_HALF_PI = 0.5 * math.pi


@dataclass(frozen=True)
class ObjectiveWeights:
    """Non-negative weights for the five cost components.

    Collision dominates by default because feasibility precedes tidiness.
    """

    manhattan: float = 1.0
    area: float = 1.0
    orth: float = 1.0
    collision: float = 50.0
    stability: float = 5.0

    def __post_init__(self) -> None:
        values = (self.manhattan, self.area, self.orth, self.collision, self.stability)
        if any(v < 0.0 for v in values):
            raise ValueError("objective weights must be non-negative")
        if not any(v > 0.0 for v in values):
            raise ValueError("at least one objective weight must be positive")

    def to_dict(self) -> dict[str, float]:
        return {
            "manhattan": self.manhattan,
            "area": self.area,
            "orth": self.orth,
            "collision": self.collision,
            "stability": self.stability,
        }

    @classmethod
    def from_dict(cls, data: dict[str, float]) -> "ObjectiveWeights":
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass
class ObjectiveBreakdown:
    manhattan: float = 0.0
    area: float = 0.0
    orth: float = 0.0
    collision_penalty: float = 0.0
    stability_cost: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict[str, float]:
        return {
            "manhattan": self.manhattan,
            "area": self.area,
            "orth": self.orth,
            "collision_penalty": self.collision_penalty,
            "stability_cost": self.stability_cost,
            "total": self.total,
        }


def _position(node: ObjectNode) -> tuple[float, float, float]:
    if node.pose is None:
        raise UnplacedNode(node.id)
    return node.pose.position


def _placed_levels(g: SceneGraph) -> list[list[ObjectNode]]:
    levels = g.depth_levels()
    out: list[list[ObjectNode]] = []
    for depth in sorted(levels):
        members = [g.nodes[i] for i in levels[depth]]
        for node in members:
            _position(node)
        out.append(members)
    return out


def manhattan_loss(g: SceneGraph) -> float:
    """Sum of pairwise L1 distances inside every depth level with > 1 node."""
    total = 0.0
    for members in _placed_levels(g):
        if len(members) < 2:
            continue
        positions = [_position(n) for n in members]
        for i in range(len(positions)):
            xi, yi, zi = positions[i]
            for j in range(i + 1, len(positions)):
                xj, yj, zj = positions[j]
                total += abs(xi - xj) + abs(yi - yj) + abs(zi - zj)
    return total


def area_loss(g: SceneGraph) -> float:
    """Manhattan spread plus the per-level bounding range product (x by y)."""
    total = manhattan_loss(g)
    for members in _placed_levels(g):
        if len(members) < 2:
            continue
        xs = [_position(n)[0] for n in members]
        ys = [_position(n)[1] for n in members]
        total += (max(xs) - min(xs)) * (max(ys) - min(ys))
    return total


def main_axis_angle(half_x: float, half_y: float, yaw: float) -> float:
    """Acute angle between an object's main footprint axis and the world x-axis.

    The main axis follows the longer horizontal half-extent; square
    footprints are axis-degenerate and score 0 by convention.
    """
    if half_x == half_y:
        return 0.0
    axis = yaw if half_x > half_y else yaw + _HALF_PI
    folded = axis % math.pi
    if folded > _HALF_PI:
        folded = math.pi - folded
    return folded


def orientation_angles(g: SceneGraph) -> list[float]:
    angles = []
    for node_id in g.movable_ids():
        node = g.nodes[node_id]
        if node.pose is None:
            raise UnplacedNode(node.id)
        angles.append(main_axis_angle(node.half_extents[0], node.half_extents[1], node.pose.yaw))
    return angles


def orthogonality_loss(g: SceneGraph) -> float:
    """Population variance of the movable objects' main-axis angles."""
    angles = orientation_angles(g)
    if not angles:
        return 0.0
    mean = sum(angles) / len(angles)
    return sum((a - mean) ** 2 for a in angles) / len(angles)


def stability_about_point(
    g: SceneGraph, ref_xy: tuple[float, float], ids: Iterable[str]
) -> float:
    """Mass-weighted concentration of the named objects around a reference point.

    Offsets are horizontal (x, y) distances between each OBB centre and the
    reference; the combined term penalizes a net centre-of-mass shift.
    """
    id_list = sorted(ids)
    if not id_list:
        raise EmptySupportSet("no objects to score")
    rx, ry = ref_xy
    total_mass = 0.0
    weighted_norms = 0.0
    sum_x = 0.0
    sum_y = 0.0
    for node_id in id_list:
        node = g.nodes[node_id]
        cx, cy, _ = node.center()
        dx, dy = cx - rx, cy - ry
        total_mass += node.mass
        weighted_norms += node.mass * math.hypot(dx, dy)
        sum_x += node.mass * dx
        sum_y += node.mass * dy
    return (weighted_norms + math.hypot(sum_x, sum_y)) / total_mass


def stability_cost(g: SceneGraph, base_id: str) -> float:
    """Stability of the base's support subtree about the base OBB centre.

    The base itself is excluded from the sum.
    """
    base = g.node(base_id)
    bx, by, _ = base.center()
    supported = [i for i in g.support_subtree(base_id) if not g.nodes[i].is_base]
    if not supported:
        raise EmptySupportSet(f"base {base_id!r} supports no movable object")
    return stability_about_point(g, (bx, by), supported)


def collision_penalty(g: SceneGraph) -> float:
    """Sum of overlap-area times vertical-overlap over colliding pairs (m^3).

    Pairs where one object sits inside the other via an in-edge are exempt:
    with box proxies, containment necessarily overlaps.
    """
    nodes = [g.nodes[i] for i in sorted(g.nodes)]
    for node in nodes:
        _position(node)
    exempt = g.containment_exempt_pairs()
    footprints = [n.footprint() for n in nodes]
    intervals = [n.z_interval() for n in nodes]
    total = 0.0
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            if frozenset((nodes[i].id, nodes[j].id)) in exempt:
                continue
            z_overlap = intervals[i].overlap_length(intervals[j])
            if z_overlap <= Z_CONTACT_TOLERANCE:
                continue
            area = footprint_overlap_area(footprints[i], footprints[j])
            if area > COLLISION_AREA_TOLERANCE:
                total += area * z_overlap
    return total


def total(
    g: SceneGraph,
    weights: ObjectiveWeights,
    base_id: str | None = None,
) -> ObjectiveBreakdown:
    """Weighted combination of all five components.

    Stability is summed over every base with a movable support subtree
    unless a specific base is named.
    """
    breakdown = ObjectiveBreakdown(
        manhattan=manhattan_loss(g),
        area=area_loss(g),
        orth=orthogonality_loss(g),
        collision_penalty=collision_penalty(g),
    )
    if base_id is not None:
        breakdown.stability_cost = stability_cost(g, base_id)
    else:
        acc = 0.0
        for candidate in g.base_ids():
            if any(not g.nodes[i].is_base for i in g.support_subtree(candidate)):
                acc += stability_cost(g, candidate)
        breakdown.stability_cost = acc
    breakdown.total = (
        weights.manhattan * breakdown.manhattan
        + weights.area * breakdown.area
        + weights.orth * breakdown.orth
        + weights.collision * breakdown.collision_penalty
        + weights.stability * breakdown.stability_cost
    )
    return breakdown
