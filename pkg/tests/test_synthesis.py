from __future__ import annotations

import math
import random

import numpy as np
import pytest

from tidyloop.errors import RegionTooSmall
from tidyloop.events import EventKind
from tidyloop.geometry import Footprint, collides, supports
from tidyloop.scene import GroupDag, Pose, Relation, RelationKind, RelationSource, SceneGraph
from tidyloop.synthesis import (
    PoseSolution,
    SynthesisConfig,
    _anneal,
    _build_group_world,
    _group_canvas,
    _group_local_solution,
    feasibility_report,
    synthesize_group,
    synthesize_scene,
)

from .conftest import make_node, on

PLANNER = RelationSource.PLANNER


def quick_cfg(seed=0, iterations=400, restarts=2) -> SynthesisConfig:
    return SynthesisConfig(seed=seed, iterations_per_group=iterations, restarts=restarts)


def cube(node_id: str, half: float, mass: float = 0.3, **kw):
    return make_node(node_id, (half, half, half), mass, **kw)


def goal_scene(members, groups, extra_edges=()):
    """Table plus grouped movables, every group root supported by the table."""
    table = make_node("table", (0.7, 0.4, 0.36), 30.0, pose=Pose((0, 0, 0)), is_base=True)
    nodes = [table] + members
    edges = list(extra_edges)
    intra_children = set()
    for grp in groups:
        for e in grp.intra_edges:
            if e.kind in (RelationKind.ON, RelationKind.IN):
                intra_children.add(e.child)
        edges.extend(grp.intra_edges)
    for grp in groups:
        for m in grp.member_ids:
            if m not in intra_children:
                edges.append(on("table", m, source=PLANNER))
    return SceneGraph(nodes=nodes, edges=edges, groups=groups)


# --- synthesize_group ---------------------------------------------------------


def test_single_object_centered_and_zero_cost():
    box = cube("box0", 0.05)
    group = GroupDag("box", ["box0"])
    region = Footprint((0.3, -0.2), (0.5, 0.5))
    solution = synthesize_group(group, region, quick_cfg(), {"box0": box})
    pose = solution.poses["box0"]
    assert pose.position[0] == pytest.approx(0.3, abs=1e-12)
    assert pose.position[1] == pytest.approx(-0.2, abs=1e-12)
    assert solution.feasible
    assert solution.breakdown.manhattan == 0.0
    assert solution.breakdown.orth == 0.0
    assert solution.breakdown.collision_penalty == 0.0
    assert solution.breakdown.area == 0.0
    assert solution.breakdown.stability_cost == pytest.approx(0.0, abs=1e-12)


def test_two_cubes_beat_random_baseline():
    members = {f"c{i}": cube(f"c{i}", 0.05) for i in range(2)}
    group = GroupDag("box", sorted(members))
    region = Footprint((0.0, 0.0), (0.5, 0.5))
    solution = synthesize_group(group, region, SynthesisConfig(seed=3), members)
    assert solution.feasible
    assert solution.breakdown.collision_penalty == 0.0

    rng = random.Random(99)
    baseline = []
    for _ in range(50):
        ax, ay = rng.uniform(-0.45, 0.45), rng.uniform(-0.45, 0.45)
        bx, by = rng.uniform(-0.45, 0.45), rng.uniform(-0.45, 0.45)
        baseline.append(abs(ax - bx) + abs(ay - by))
    baseline.sort()
    median = baseline[len(baseline) // 2]
    assert solution.breakdown.manhattan < median


def test_region_too_small():
    members = {f"c{i}": cube(f"c{i}", 0.3) for i in range(2)}
    group = GroupDag("box", sorted(members))
    region = Footprint((0.0, 0.0), (0.25, 0.25))
    with pytest.raises(RegionTooSmall):
        synthesize_group(group, region, quick_cfg(), members)


def test_group_determinism_bit_for_bit():
    members = {f"c{i}": cube(f"c{i}", 0.04 + 0.01 * i) for i in range(4)}
    group = GroupDag("box", sorted(members))
    region = Footprint((0.1, 0.2), (0.5, 0.4))
    a = synthesize_group(group, region, SynthesisConfig(seed=11), members)
    b = synthesize_group(group, region, SynthesisConfig(seed=11), members)
    assert a.poses == b.poses
    c = synthesize_group(group, region, SynthesisConfig(seed=12), members)
    assert a.poses != c.poses


def test_annealing_best_cost_non_increasing():
    members = {f"c{i}": cube(f"c{i}", 0.05) for i in range(4)}
    group = GroupDag("box", sorted(members))
    world = _build_group_world(group, members, (0.5, 0.5))
    world.grid_scatter()
    cfg = quick_cfg(iterations=600, restarts=1)
    trace: list[float] = []
    _anneal(world, cfg, np.random.default_rng(5), trace=trace)
    assert all(b <= a + 1e-15 for a, b in zip(trace, trace[1:]))


def test_stacked_pair_keeps_support():
    box = cube("box0", 0.08, mass=0.5)
    book = make_node("book0", (0.07, 0.05, 0.015), 0.3, label="book")
    group = GroupDag(
        "box", ["box0", "book0"], intra_edges=[on("box0", "book0", source=PLANNER)]
    )
    region = Footprint((0.0, 0.0), (0.4, 0.4))
    nodes = {"box0": box, "book0": book}
    solution = synthesize_group(group, region, quick_cfg(seed=2), nodes)
    assert solution.feasible
    parent = box.copy()
    parent.pose = solution.poses["box0"]
    child = book.copy()
    child.pose = solution.poses["book0"]
    assert supports(parent.footprint(), parent.z_interval(), child.footprint(), child.z_interval())
    # z is derived: child bottom must sit exactly on the parent top
    assert child.pose.position[2] == parent.pose.position[2] + 2 * box.half_extents[2]


def test_breakdown_recomputable_and_consistent():
    members = {f"c{i}": cube(f"c{i}", 0.05) for i in range(3)}
    group = GroupDag("box", sorted(members))
    region = Footprint((0.0, 0.0), (0.5, 0.5))
    cfg = quick_cfg(seed=7)
    solution = synthesize_group(group, region, cfg, members)
    from tidyloop.synthesis import group_breakdown

    recomputed = group_breakdown(group, members, solution.poses, cfg.weights, region.center)
    assert recomputed.to_dict() == pytest.approx(solution.breakdown.to_dict())


# --- synthesize_scene ----------------------------------------------------------


def test_scene_single_group_reduces_to_group_synthesis(table):
    obj = cube("mug0", 0.04, mass=0.25)
    obj.category = "tableware"
    group = GroupDag("tableware", ["mug0"])
    g = goal_scene([obj], [group])
    cfg = quick_cfg(seed=21)
    scene_solution = synthesize_scene(g, "table", cfg)
    table_node = g.nodes["table"]
    group_solution = synthesize_group(
        group, table_node.footprint(), cfg, g.nodes, surface_z=table_node.top()
    )
    assert scene_solution.poses["mug0"] == group_solution.poses["mug0"]


def test_scene_two_groups_collision_free_and_supported():
    books = [make_node(f"book{i}", (0.08, 0.06, 0.015), 0.4, label="book", category="reading") for i in range(2)]
    mugs = [make_node(f"mug{i}", (0.04, 0.04, 0.05), 0.25, label="mug", category="tableware") for i in range(2)]
    groups = [
        GroupDag("reading", [b.id for b in books]),
        GroupDag("tableware", [m.id for m in mugs]),
    ]
    g = goal_scene(books + mugs, groups)
    solution = synthesize_scene(g, "table", quick_cfg(seed=4, iterations=800))
    assert solution.feasible, [e.to_dict() for e in solution.feedback]
    placed = g.with_poses(solution.poses)
    # independent all-pairs check
    ids = placed.movable_ids()
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            a, b = placed.nodes[ids[i]], placed.nodes[ids[j]]
            assert not collides(a.footprint(), a.z_interval(), b.footprint(), b.z_interval())
    table_node = placed.nodes["table"]
    for node_id in ids:
        node = placed.nodes[node_id]
        assert supports(table_node.footprint(), table_node.z_interval(), node.footprint(), node.z_interval())


def test_scene_determinism_across_worker_counts():
    books = [make_node(f"book{i}", (0.08, 0.06, 0.015), 0.4, category="reading") for i in range(2)]
    mugs = [make_node(f"mug{i}", (0.04, 0.04, 0.05), 0.25, category="tableware") for i in range(2)]
    groups = [
        GroupDag("reading", [b.id for b in books]),
        GroupDag("tableware", [m.id for m in mugs]),
    ]
    g = goal_scene(books + mugs, groups)
    first = synthesize_scene(g, "table", quick_cfg(seed=8), max_workers=1)
    second = synthesize_scene(g, "table", quick_cfg(seed=8), max_workers=2)
    assert first.poses == second.poses


def test_left_of_relation_orders_group_centroids():
    wins = 0
    for seed in range(20):
        books = [make_node(f"book{i}", (0.08, 0.06, 0.015), 0.4, category="reading") for i in range(2)]
        mugs = [make_node(f"mug{i}", (0.04, 0.04, 0.05), 0.25, category="tableware") for i in range(2)]
        groups = [
            GroupDag("reading", [b.id for b in books]),
            GroupDag("tableware", [m.id for m in mugs]),
        ]
        # books to the left of the mugs
        cross = Relation(RelationKind.LEFT_OF, parent="mug0", child="book0", source=PLANNER)
        g = goal_scene(books + mugs, groups, extra_edges=[cross])
        solution = synthesize_scene(g, "table", quick_cfg(seed=seed, iterations=800))
        book_x = sum(solution.poses[b.id].position[0] for b in books) / 2
        mug_x = sum(solution.poses[m.id].position[0] for m in mugs) / 2
        if book_x < mug_x:
            wins += 1
    assert wins == 20


def test_mapping_back_preserves_intra_group_geometry():
    books = [make_node(f"book{i}", (0.08, 0.06, 0.015), 0.4, category="reading") for i in range(3)]
    mugs = [make_node(f"mug{i}", (0.04, 0.04, 0.05), 0.25, category="tableware") for i in range(2)]
    groups = [
        GroupDag("reading", [b.id for b in books]),
        GroupDag("tableware", [m.id for m in mugs]),
    ]
    g = goal_scene(books + mugs, groups)
    cfg = quick_cfg(seed=13)
    solution = synthesize_scene(g, "table", cfg)

    surface_he = g.nodes["table"].footprint().half_extents
    areas = [
        sum(4 * g.nodes[m].half_extents[0] * g.nodes[m].half_extents[1] for m in grp.member_ids)
        for grp in groups
    ]
    total_area = sum(areas)
    for gi, grp in enumerate(groups):
        canvas = _group_canvas(grp, g.nodes, surface_he, areas[gi] / total_area)
        local = _group_local_solution(grp, g.nodes, canvas, cfg, gi)
        for a_pos in range(local.n):
            for b_pos in range(a_pos + 1, local.n):
                da = math.hypot(
                    local.x[a_pos] - local.x[b_pos], local.y[a_pos] - local.y[b_pos]
                )
                pa = solution.poses[local.ids[a_pos]].position
                pb = solution.poses[local.ids[b_pos]].position
                db = math.hypot(pa[0] - pb[0], pa[1] - pb[1])
                assert db == pytest.approx(da, abs=1e-9)
                rel_local = (local.yaw[a_pos] - local.yaw[b_pos]) % (2 * math.pi)
                rel_world = (
                    solution.poses[local.ids[a_pos]].yaw
                    - solution.poses[local.ids[b_pos]].yaw
                ) % (2 * math.pi)
                assert rel_world == pytest.approx(rel_local, abs=1e-9)


# --- feasibility_report ---------------------------------------------------------


def test_feasibility_report_clean(table_scene):
    assert feasibility_report(table_scene) == []


def test_feasibility_report_collision(table):
    a = cube("a", 0.5, pose=Pose((0.0, 0.0, 1.0)))
    b = cube("b", 0.5, pose=Pose((0.0, 0.0, 1.0)))
    g = SceneGraph(nodes=[table, a, b], edges=[on("table", "a"), on("table", "b")])
    events = feasibility_report(g)
    collision = [e for e in events if e.kind is EventKind.COLLISION]
    assert len(collision) == 1
    assert sorted(collision[0].payload["objects"]) == ["a", "b"]


def test_feasibility_report_collapse(table):
    cup = make_node("cup", (0.04, 0.04, 0.05), 0.25, pose=Pose((0.9, 0.0, table.top())))
    g = SceneGraph(nodes=[table, cup], edges=[on("table", "cup")])
    events = feasibility_report(g)
    assert [e.kind for e in events] == [EventKind.COLLAPSE]
    assert events[0].payload["objects"] == ["table", "cup"]
    assert events[0].payload["violated"]["kind"] == "on"


def test_wall_clock_budget_ten_objects():
    import time

    members = {}
    for i in range(10):
        node = make_node(f"obj{i}", (0.03 + 0.005 * i, 0.03, 0.02), 0.2, category="box")
        members[node.id] = node
    group = GroupDag("box", sorted(members))
    for node in members.values():
        node.category = "box"
    g = goal_scene(list(members.values()), [group])
    start = time.perf_counter()
    solution = synthesize_scene(g, "table", SynthesisConfig(seed=0))
    elapsed = time.perf_counter() - start
    assert elapsed < 2.0, f"synthesis took {elapsed:.2f}s"
    assert isinstance(solution, PoseSolution)
