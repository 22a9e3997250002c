from __future__ import annotations

import pytest

from tidyloop.backends import MockBackend
from tidyloop.bench import (
    ActivityType,
    apply_preference_transform,
    compute_raw_metrics,
    default_spec,
    min_max_normalize,
    mix_or_separate,
    preference_predicate,
    preference_tags,
    run_benchmark,
    sample_scenario,
    sample_tabletop_scene,
    score,
)
from tidyloop.errors import EmptyBatch, UnknownPreferenceTag
from tidyloop.scene import Pose, Relation, RelationKind, RelationSource, SceneGraph
from tidyloop.synthesis import SynthesisConfig

from .conftest import in_, make_node, on

PLANNER = RelationSource.PLANNER


def flat_goal():
    table = make_node("table", (0.7, 0.4, 0.36), 30.0, pose=Pose((0, 0, 0)), is_base=True)
    books = [make_node(f"book{i}", (0.08, 0.06, 0.015), 0.4, label="book",
                       category="reading") for i in range(2)]
    mug = make_node("mug0", (0.04, 0.04, 0.05), 0.25, label="mug", category="tableware")
    return SceneGraph(
        nodes=[table] + books + [mug],
        edges=[on("table", n.id, source=PLANNER) for n in books + [mug]],
    )


# --- normalization ---------------------------------------------------------------


def test_min_max_normalization_definition():
    assert min_max_normalize([2.0, 4.0, 6.0]) == [0.0, 5.0, 10.0]


def test_min_max_degenerate_range_maps_to_midpoint():
    assert min_max_normalize([3.0, 3.0, 3.0]) == [5.0, 5.0, 5.0]


def test_min_max_empty_batch():
    with pytest.raises(EmptyBatch):
        min_max_normalize([])


def test_min_max_monotone():
    values = [5.0, 1.0, 9.0, 3.0]
    normalized = min_max_normalize(values)
    pairs = sorted(zip(values, normalized))
    assert all(b[1] >= a[1] for a, b in zip(pairs, pairs[1:]))


def test_score_requires_batch(table_scene):
    with pytest.raises(EmptyBatch):
        score(table_scene, None, None, None, "a", "a", batch=[])


def test_score_pref_learn_identity():
    g = flat_goal()
    raw = compute_raw_metrics(
        g, None, None, None,
        learned_pref="lay everything flat",
        ground_truth_pref="lay everything flat",
        pref_tag="no_stacking",
        pref_apply_goal=g,
    )
    assert raw["pref_learn"] == pytest.approx(1.0, abs=1e-9)
    assert raw["pref_apply"] == 1.0


# --- predicates -------------------------------------------------------------------


def test_no_stacking_predicate():
    g = flat_goal()
    assert preference_predicate("no_stacking", g) is True
    g.edges.append(Relation(RelationKind.ON, "book0", "book1", PLANNER))
    g.edges = [e for e in g.edges if not (e.kind is RelationKind.ON and e.child == "book1" and e.parent == "table")]
    assert preference_predicate("no_stacking", g) is False


def test_same_container_split_carts_fails():
    cart_a = make_node("cart_a", (0.45, 0.35, 0.3), 25.0, label="cart",
                       pose=Pose((0, 0, 0)), is_base=True, is_container=True)
    cart_b = make_node("cart_b", (0.45, 0.35, 0.3), 25.0, label="cart",
                       pose=Pose((2, 0, 0)), is_base=True, is_container=True)
    boxes = [make_node(f"box{i}", (0.05, 0.05, 0.05), 0.3, label="box") for i in range(2)]
    split = SceneGraph(
        nodes=[cart_a, cart_b] + boxes,
        edges=[in_("cart_a", "box0"), in_("cart_b", "box1")],
    )
    assert preference_predicate("same_container", split) is False
    together = SceneGraph(
        nodes=[cart_a.copy(), cart_b.copy()] + [b.copy() for b in boxes],
        edges=[in_("cart_a", "box0"), in_("cart_a", "box1")],
    )
    assert preference_predicate("same_container", together) is True


def test_mix_and_separate_predicates():
    g = flat_goal()
    assert preference_predicate("separate", g) is True
    assert preference_predicate("mix", g) is False
    g.edges.append(Relation(RelationKind.ON, "book0", "mug0", PLANNER))
    assert preference_predicate("mix", g) is True
    assert preference_predicate("separate", g) is False


def test_unknown_preference_tag():
    with pytest.raises(UnknownPreferenceTag):
        preference_predicate("levitate_everything", flat_goal())
    assert "no_stacking" in preference_tags()


# --- the mix/separate ground-truth rule ----------------------------------------------


def test_mix_rule_spec_example():
    # 2 boxes + 7 cylinders: 2/9 < 1/3 -> mix
    assert mix_or_separate({"box": 2, "cylinder": 7}) == "mix"


def test_separate_rule_balanced():
    assert mix_or_separate({"box": 4, "cylinder": 5}) == "separate"
    assert mix_or_separate({"box": 3, "cylinder": 6}) == "separate"  # exactly one third


# --- sampler ----------------------------------------------------------------------


def test_sampler_determinism():
    spec = default_spec(ActivityType.TIDY, seed=9)
    a = sample_scenario(spec)
    b = sample_scenario(spec)
    assert a.scene.canonical_json() == b.scene.canonical_json()
    assert a.preference_tag == b.preference_tag


def test_sampler_scene_validates_all_activities():
    for activity in ActivityType:
        scenario = sample_scenario(default_spec(activity, seed=3))
        assert scenario.scene.validate().ok, activity
        assert scenario.instruction
        assert scenario.preference_text


def test_non_semantic_sampler_uses_rule():
    scenario = sample_scenario(default_spec(ActivityType.TIDY, seed=5, semantic=False))
    labels = {scenario.scene.nodes[i].label for i in scenario.scene.movable_ids()}
    assert labels <= {"box", "cylinder"}
    counts = {
        label: sum(
            1 for i in scenario.scene.movable_ids()
            if scenario.scene.nodes[i].label == label
        )
        for label in labels
    }
    assert scenario.preference_tag == mix_or_separate(counts)


def test_tabletop_sampler_sizes_and_groups():
    scene, surface = sample_tabletop_scene(0)
    count = len(scene.movable_ids())
    assert 3 <= count <= 5
    assert surface == "table"
    grouped = {m for grp in scene.groups for m in grp.member_ids}
    assert grouped == set(scene.movable_ids())
    again, _ = sample_tabletop_scene(0)
    assert again.canonical_json() == scene.canonical_json()


# --- transforms -------------------------------------------------------------------


def test_no_stacking_transform_flattens():
    g = flat_goal()
    g.edges = [e for e in g.edges if e.child != "book1"]
    g.edges.append(Relation(RelationKind.ON, "book0", "book1", PLANNER))
    edited = apply_preference_transform(g, "no_stacking")
    assert edited is not None
    assert preference_predicate("no_stacking", edited)
    assert apply_preference_transform(edited, "no_stacking") is None  # nothing left to do


def test_mix_transform_creates_cross_stack():
    g = flat_goal()
    edited = apply_preference_transform(g, "mix")
    assert edited is not None
    assert preference_predicate("mix", edited)


# --- batch pipeline ------------------------------------------------------------------


def test_run_benchmark_populates_all_metrics():
    spec = default_spec(ActivityType.TIDY, seed=21)
    report = run_benchmark(
        spec, 2, SynthesisConfig(seed=1, iterations_per_group=400, restarts=1), MockBackend()
    )
    assert len(report["runs"]) == 2
    for row in report["runs"]:
        for metric in ("stability", "area", "length", "feasibility", "pref_learn", "pref_apply"):
            assert metric in row["raw"]
            assert metric in row["normalized"]
            assert 0.0 <= row["normalized"][metric] <= 10.0
    assert report["config_hash"]
    assert report["batch_ranges"]
