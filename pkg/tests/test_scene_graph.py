from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tidyloop.errors import CycleDetected, NodeUniverseMismatch
from tidyloop.scene import (
    ChangeKind,
    Pose,
    Relation,
    RelationKind,
    RelationSource,
    SceneGraph,
)

from .conftest import in_, make_node, on


def test_depth_levels_single_hop(table):
    cup = make_node("cup", pose=Pose((0.0, 0.0, table.top())))
    g = SceneGraph(nodes=[table, cup], edges=[on("table", "cup")])
    assert g.depth_levels() == {0: ["table"], 1: ["cup"]}


def test_depth_levels_two_tiers(table):
    nodes = [table, make_node("cup"), make_node("saucer"), make_node("spoon")]
    g = SceneGraph(
        nodes=nodes,
        edges=[on("table", "cup"), on("table", "saucer"), on("saucer", "spoon")],
    )
    assert g.depth_levels() == {0: ["table"], 1: ["cup", "saucer"], 2: ["spoon"]}


def test_depth_levels_cycle_detected():
    g = SceneGraph(
        nodes=[make_node("cup"), make_node("saucer")],
        edges=[on("cup", "saucer"), on("saucer", "cup")],
    )
    with pytest.raises(CycleDetected):
        g.depth_levels()


def test_depth_levels_partitions_nodes(table_scene):
    levels = table_scene.depth_levels()
    all_ids = [i for ids in levels.values() for i in ids]
    assert sorted(all_ids) == sorted(table_scene.nodes)
    assert len(all_ids) == len(table_scene.nodes)


def test_diff_identity(table_scene):
    assert table_scene.diff(table_scene.copy()) == []


def test_diff_relation_move(table):
    book1 = make_node("book1", label="book")
    book2 = make_node("book2", label="book")
    before = SceneGraph(
        nodes=[table, book1, book2],
        edges=[on("table", "book1"), on("book1", "book2")],
    )
    after = SceneGraph(
        nodes=[table.copy(), book1.copy(), book2.copy()],
        edges=[on("table", "book1"), on("table", "book2")],
    )
    changes = before.diff(after)
    kinds = {(c.kind, c.relation.key() if c.relation else None) for c in changes}
    assert kinds == {
        (ChangeKind.RELATION_REMOVED, ("on", "book1", "book2")),
        (ChangeKind.RELATION_ADDED, ("on", "table", "book2")),
    }


def test_diff_state_flip():
    box_closed = make_node("box", is_container=True)
    box_open = make_node("box", is_container=True, states={"open": True})
    before = SceneGraph(nodes=[box_closed])
    after = SceneGraph(nodes=[box_open])
    changes = before.diff(after)
    assert len(changes) == 1
    change = changes[0]
    assert change.kind is ChangeKind.STATE_CHANGED
    assert (change.object_id, change.state, change.before, change.after) == (
        "box", "open", False, True,
    )


def test_diff_node_universe_mismatch(table):
    g1 = SceneGraph(nodes=[table])
    g2 = SceneGraph(nodes=[table.copy(), make_node("cup")])
    with pytest.raises(NodeUniverseMismatch):
        g1.diff(g2)


def _random_graph(rng: random.Random) -> SceneGraph:
    ids = [f"obj{i}" for i in range(rng.randint(2, 6))]
    nodes = [make_node("table", is_base=True)] + [make_node(i) for i in ids]
    container = rng.choice(ids)
    for node in nodes:
        if node.id == container:
            node.is_container = True
            node.states = {"open": rng.random() < 0.5}
    edges = []
    placed = ["table"]
    for node_id in ids:
        parent = rng.choice(placed)
        if parent == container and rng.random() < 0.5:
            edges.append(in_(parent, node_id))
        else:
            edges.append(on(parent, node_id))
        placed.append(node_id)
    return SceneGraph(nodes=nodes, edges=edges)


@pytest.mark.parametrize("seed", range(20))
def test_diff_reversal_and_edit_script(seed):
    rng = random.Random(seed)
    a = _random_graph(rng)
    b = a.copy()
    # shuffle b: retarget some children and flip a state
    movables = b.movable_ids()
    for node_id in movables:
        if rng.random() < 0.4:
            others = [i for i in b.nodes if i != node_id]
            new_parent = rng.choice(others)
            b.edges = [e for e in b.edges if not (e.kind in {RelationKind.ON, RelationKind.IN} and e.child == node_id)]
            b.edges.append(on(new_parent, node_id))
    for node in b.nodes.values():
        if node.is_container and rng.random() < 0.5:
            node.states["open"] = not node.states.get("open", False)

    forward = a.diff(b)
    backward = b.diff(a)

    def canon(changes):
        from tidyloop.scene import canonical_dumps

        return sorted(canonical_dumps(c.to_dict()) for c in changes)

    assert canon(c.reversed() for c in forward) == canon(backward)
    rebuilt = a.apply_changes(forward)
    assert rebuilt.edge_keys() == b.edge_keys()
    for node_id in b.nodes:
        assert rebuilt.nodes[node_id].states == b.nodes[node_id].states


def test_validate_clean_scene(table_scene):
    assert table_scene.validate().ok


def test_validate_dangling_edge(table):
    g = SceneGraph(nodes=[table], edges=[on("table", "ghost")])
    assert "DanglingEdge" in g.validate().codes()


def test_validate_non_container_in(table):
    cup = make_node("cup")
    pen = make_node("pen")
    g = SceneGraph(nodes=[table, cup, pen], edges=[in_("cup", "pen")])
    assert "NonContainerIn" in g.validate().codes()


def test_validate_base_as_child(table):
    shelf = make_node("shelf", is_base=True)
    g = SceneGraph(nodes=[table, shelf], edges=[on("table", "shelf")])
    assert "BaseAsChild" in g.validate().codes()


def test_validate_container_state_rules():
    box = make_node("box", is_container=True, states={})
    assert "ContainerStateMissing" in SceneGraph(nodes=[box]).validate().codes()
    cup = make_node("cup", states={"open": True})
    assert "SpuriousOpenState" in SceneGraph(nodes=[cup]).validate().codes()


def test_pose_yaw_normalized():
    import math

    assert Pose((0, 0, 0), yaw=2 * math.pi).yaw == 0.0
    assert Pose((0, 0, 0), yaw=-0.5).yaw == pytest.approx(2 * math.pi - 0.5)
    assert 0.0 <= Pose((0, 0, 0), yaw=123.456).yaw < 2 * math.pi


def test_relation_rejects_self_loop():
    with pytest.raises(ValueError):
        Relation(RelationKind.ON, "cup", "cup", RelationSource.PLANNER)


def test_scene_document_round_trip(table_scene):
    doc = table_scene.to_document()
    rebuilt = SceneGraph.from_document(doc)
    assert rebuilt.to_document() == doc
    assert rebuilt.canonical_json() == table_scene.canonical_json()


@settings(max_examples=50, deadline=None)
@given(
    yaw=st.floats(min_value=-50.0, max_value=50.0, allow_nan=False),
    z=st.floats(min_value=-5.0, max_value=5.0, allow_nan=False),
)
def test_pose_serialization_round_trip(yaw, z):
    pose = Pose((1.25, -0.5, z), yaw)
    assert Pose.from_dict(pose.to_dict()) == pose


def test_containment_exempt_pairs(table):
    box = make_node("box", is_container=True)
    pen = make_node("pen")
    cap = make_node("cap")
    g = SceneGraph(
        nodes=[table, box, pen, cap],
        edges=[on("table", "box"), in_("box", "pen"), on("pen", "cap")],
    )
    exempt = g.containment_exempt_pairs()
    assert frozenset(("box", "pen")) in exempt
    assert frozenset(("box", "cap")) in exempt  # stacked inside the box
    assert frozenset(("pen", "cap")) not in exempt
    assert frozenset(("table", "box")) not in exempt
