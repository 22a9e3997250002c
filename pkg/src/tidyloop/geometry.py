"""Oriented-box footprint geometry for a 2.5D stacking world.

Objects are yaw-rotated rectangles (footprints) extruded over a vertical
interval.  Overlap areas are computed analytically by convex polygon
clipping; collision and support predicates are built on top of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

# Footprint overlap below this area (m^2) does not count as a collision.
COLLISION_AREA_TOLERANCE = 1e-6
# Vertical overlap below this measure (m) is numerical contact noise from
# cross-frame arithmetic, not interpenetration.
Z_CONTACT_TOLERANCE = 1e-12
# Face-contact tolerance for the support predicate (m).
SUPPORT_Z_TOLERANCE = 1e-4
# Default support margin, as a fraction of the smallest half-extent of the
# two footprints involved.  The child's footprint centre must project at
# least this far inside the parent's edge, else the stack counts as collapsed.
DEFAULT_SUPPORT_MARGIN_FRACTION = 0.2

_HALF_PI = 0.5 * math.pi
_AXIS_ALIGNED_TOL = 1e-12


@dataclass(frozen=True)
class Footprint:
    """Yaw-rotated rectangle: the top-down projection of an oriented box."""

    center: tuple[float, float]
    half_extents: tuple[float, float]
    yaw: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        hx, hy = float(self.half_extents[0]), float(self.half_extents[1])
        if hx <= 0.0 or hy <= 0.0:
            raise ValueError(f"half_extents must be positive, got {(hx, hy)}")
        object.__setattr__(self, "half_extents", (hx, hy))
        object.__setattr__(self, "yaw", float(self.yaw))

    @property
    def circumradius(self) -> float:
        return math.hypot(self.half_extents[0], self.half_extents[1])

    @property
    def area(self) -> float:
        return 4.0 * self.half_extents[0] * self.half_extents[1]

    def corners(self) -> list[tuple[float, float]]:
        """Corner coordinates in counter-clockwise order."""
        cx, cy = self.center
        hx, hy = self.half_extents
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = []
        for lx, ly in ((hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy)):
            out.append((cx + lx * c - ly * s, cy + lx * s + ly * c))
        return out

    def to_local(self, point: tuple[float, float]) -> tuple[float, float]:
        """Express a world point in this footprint's rotated frame."""
        dx = point[0] - self.center[0]
        dy = point[1] - self.center[1]
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return (dx * c + dy * s, -dx * s + dy * c)

    def contains_point(self, point: tuple[float, float], shrink: float = 0.0) -> bool:
        lx, ly = self.to_local(point)
        return (
            abs(lx) <= self.half_extents[0] - shrink
            and abs(ly) <= self.half_extents[1] - shrink
        )

    def rotated_aabb_half_extents(self) -> tuple[float, float]:
        """Half-extents of the axis-aligned box enclosing this footprint."""
        hx, hy = self.half_extents
        c, s = abs(math.cos(self.yaw)), abs(math.sin(self.yaw))
        return (hx * c + hy * s, hx * s + hy * c)


@dataclass(frozen=True)
class ZInterval:
    """Vertical extent of a placed box, bottom face to top face."""

    bottom: float
    top: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "bottom", float(self.bottom))
        object.__setattr__(self, "top", float(self.top))
        if self.top <= self.bottom:
            raise ValueError(f"top must exceed bottom, got [{self.bottom}, {self.top}]")

    @property
    def length(self) -> float:
        return self.top - self.bottom

    def overlap_length(self, other: "ZInterval") -> float:
        """Signed overlap; non-positive means disjoint or merely touching."""
        return min(self.top, other.top) - max(self.bottom, other.bottom)


def _axis_aligned(yaw: float) -> bool:
    m = yaw % _HALF_PI
    return m < _AXIS_ALIGNED_TOL or _HALF_PI - m < _AXIS_ALIGNED_TOL


def _clip_polygon(
    subject: list[tuple[float, float]], clip: list[tuple[float, float]]
) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clip of a convex subject by a convex CCW clip polygon."""
    output = subject
    n = len(clip)
    for i in range(n):
        if not output:
            return []
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        points = output
        output = []
        px, py = points[-1]
        p_side = ex * (py - ay) - ey * (px - ax)
        for qx, qy in points:
            q_side = ex * (qy - ay) - ey * (qx - ax)
            if q_side >= 0.0:
                if p_side < 0.0:
                    t = p_side / (p_side - q_side)
                    output.append((px + t * (qx - px), py + t * (qy - py)))
                output.append((qx, qy))
            elif p_side >= 0.0:
                t = p_side / (p_side - q_side)
                output.append((px + t * (qx - px), py + t * (qy - py)))
            px, py, p_side = qx, qy, q_side
    return output


def _polygon_area(points: list[tuple[float, float]]) -> float:
    if len(points) < 3:
        return 0.0
    acc = 0.0
    px, py = points[-1]
    for qx, qy in points:
        acc += px * qy - qx * py
        px, py = qx, qy
    return 0.5 * abs(acc)


def overlap_area_raw(
    acx: float, acy: float, ahx: float, ahy: float, ayaw: float,
    bcx: float, bcy: float, bhx: float, bhy: float, byaw: float,
) -> float:
    """Float-tuple core of the rectangle intersection, allocation-light for
    tight optimizer loops."""
    dx = bcx - acx
    dy = bcy - acy
    reach = math.hypot(ahx, ahy) + math.hypot(bhx, bhy)
    if dx * dx + dy * dy > reach * reach:
        return 0.0
    if _axis_aligned(ayaw) and _axis_aligned(byaw):
        if round(ayaw / _HALF_PI) % 2:
            ahx, ahy = ahy, ahx
        if round(byaw / _HALF_PI) % 2:
            bhx, bhy = bhy, bhx
        ox = min(acx + ahx, bcx + bhx) - max(acx - ahx, bcx - bhx)
        if ox <= 0.0:
            return 0.0
        oy = min(acy + ahy, bcy + bhy) - max(acy - ahy, bcy - bhy)
        if oy <= 0.0:
            return 0.0
        return ox * oy
    ca, sa = math.cos(ayaw), math.sin(ayaw)
    cb, sb = math.cos(byaw), math.sin(byaw)
    subject = [
        (acx + lx * ca - ly * sa, acy + lx * sa + ly * ca)
        for lx, ly in ((ahx, ahy), (-ahx, ahy), (-ahx, -ahy), (ahx, -ahy))
    ]
    clip = [
        (bcx + lx * cb - ly * sb, bcy + lx * sb + ly * cb)
        for lx, ly in ((bhx, bhy), (-bhx, bhy), (-bhx, -bhy), (bhx, -bhy))
    ]
    return _polygon_area(_clip_polygon(subject, clip))


def footprint_overlap_area(a: Footprint, b: Footprint) -> float:
    """Intersection area of two yaw-rotated rectangles (m^2)."""
    return overlap_area_raw(
        a.center[0], a.center[1], a.half_extents[0], a.half_extents[1], a.yaw,
        b.center[0], b.center[1], b.half_extents[0], b.half_extents[1], b.yaw,
    )


def collides(
    a_fp: Footprint,
    a_z: ZInterval,
    b_fp: Footprint,
    b_z: ZInterval,
    area_tolerance: float = COLLISION_AREA_TOLERANCE,
) -> bool:
    """True iff the boxes overlap with positive vertical measure and more
    than ``area_tolerance`` of footprint area.  Touching faces do not collide."""
    if a_z.overlap_length(b_z) <= Z_CONTACT_TOLERANCE:
        return False
    return footprint_overlap_area(a_fp, b_fp) > area_tolerance


def support_margin(parent: Footprint, child: Footprint) -> float:
    smallest = min(
        parent.half_extents[0], parent.half_extents[1],
        child.half_extents[0], child.half_extents[1],
    )
    return DEFAULT_SUPPORT_MARGIN_FRACTION * smallest


def supports(
    parent_fp: Footprint,
    parent_z: ZInterval,
    child_fp: Footprint,
    child_z: ZInterval,
    margin: float | None = None,
    z_tolerance: float = SUPPORT_Z_TOLERANCE,
) -> bool:
    """True iff the child rests on the parent: bottom face on the parent's
    top face and footprint centre projecting inside the parent's footprint
    shrunk by ``margin`` (the collapse predicate)."""
    if abs(child_z.bottom - parent_z.top) > z_tolerance:
        return False
    if margin is None:
        margin = support_margin(parent_fp, child_fp)
    return parent_fp.contains_point(child_fp.center, shrink=margin)


def contains(
    parent_fp: Footprint,
    parent_z: ZInterval,
    child_fp: Footprint,
    child_z: ZInterval,
    tolerance: float = 1e-9,
    require_top: bool = True,
) -> bool:
    """True iff the child box sits fully inside the parent box.

    ``require_top=False`` relaxes the upper bound so tall items may stick
    out of an open container.
    """
    if child_z.bottom < parent_z.bottom - tolerance:
        return False
    if require_top and child_z.top > parent_z.top + tolerance:
        return False
    hx, hy = parent_fp.half_extents
    for corner in child_fp.corners():
        lx, ly = parent_fp.to_local(corner)
        if abs(lx) > hx + tolerance or abs(ly) > hy + tolerance:
            return False
    return True
