from __future__ import annotations

import pytest

from tidyloop.scene import (
    ObjectNode,
    Pose,
    Relation,
    RelationKind,
    RelationSource,
    SceneGraph,
)

OBS = RelationSource.INITIAL_OBSERVATION


def make_node(
    node_id: str,
    half_extents=(0.05, 0.05, 0.05),
    mass=0.2,
    label=None,
    pose=None,
    is_base=False,
    is_container=False,
    category="",
    states=None,
):
    if states is None:
        states = {"open": False} if is_container else {}
    return ObjectNode(
        id=node_id,
        label=label if label is not None else node_id.rstrip("0123456789_"),
        half_extents=half_extents,
        mass=mass,
        category=category,
        pose=pose,
        states=states,
        is_container=is_container,
        is_base=is_base,
    )


def on(parent: str, child: str, source=OBS, step_index=None) -> Relation:
    return Relation(RelationKind.ON, parent, child, source, step_index)


def in_(parent: str, child: str, source=OBS) -> Relation:
    return Relation(RelationKind.IN, parent, child, source)


@pytest.fixture
def table() -> ObjectNode:
    return make_node(
        "table",
        half_extents=(0.7, 0.4, 0.36),
        mass=30.0,
        pose=Pose((0.0, 0.0, 0.0)),
        is_base=True,
    )


@pytest.fixture
def table_scene(table) -> SceneGraph:
    """Table with a cup and a saucer on it and a spoon on the saucer."""
    table_top = table.top()
    cup = make_node("cup", (0.04, 0.04, 0.05), 0.25, pose=Pose((0.2, 0.1, table_top)))
    saucer = make_node("saucer", (0.07, 0.07, 0.01), 0.15, pose=Pose((-0.2, -0.1, table_top)))
    spoon = make_node(
        "spoon", (0.08, 0.01, 0.01), 0.05, pose=Pose((-0.2, -0.1, saucer.top()))
    )
    return SceneGraph(
        nodes=[table, cup, saucer, spoon],
        edges=[on("table", "cup"), on("table", "saucer"), on("saucer", "spoon")],
    )
