from __future__ import annotations

import pytest

from tidyloop.bench import preference_predicate
from tidyloop.config import EngineConfig
from tidyloop.errors import LoopBudgetExhausted, NoProgress
from tidyloop.scene import Pose, SceneGraph
from tidyloop.session import (
    SessionManager,
    SessionStatus,
    replay_transcript,
    run_loop,
    surface_for,
)

from .conftest import make_node, on


def engine_config(tmp_path, **synthesis) -> EngineConfig:
    params = {"seed": 3, "iterations_per_group": 500, "restarts": 2}
    params.update(synthesis)
    return EngineConfig.from_dict(
        {"sessions_dir": str(tmp_path / "sessions"), "synthesis": params}
    )


def table_with(labels_and_nodes):
    table = make_node("table", (0.7, 0.4, 0.36), 30.0, label="table",
                      pose=Pose((0, 0, 0)), is_base=True)
    nodes = [table] + labels_and_nodes
    edges = [on("table", n.id) for n in labels_and_nodes]
    return SceneGraph(nodes=nodes, edges=edges)


def books_scene(n=3):
    return table_with(
        [make_node(f"book{i}", (0.08, 0.06, 0.015), 0.4, label="book") for i in range(n)]
    )


def crate_scene():
    crate = make_node("crate0", (0.15, 0.12, 0.08), 1.0, label="crate", is_container=True)
    pens = [make_node(f"pen{i}", (0.06, 0.01, 0.01), 0.02, label="pen") for i in range(2)]
    return table_with([crate] + pens)


def oversized_scene():
    slab = make_node("slab0", (0.9, 0.6, 0.05), 8.0, label="slab")
    return table_with([slab])


def test_run_loop_converges_first_iteration(tmp_path):
    config = engine_config(tmp_path)
    manager = SessionManager(config)
    session = manager.create(books_scene(), "tidy up the table", seed=0)
    run_loop(session, manager.backend(), config)
    assert session.status is SessionStatus.CONVERGED
    assert session.loop_iteration == 1
    assert session.solution is not None and session.solution.feasible


def test_container_repair_converges_in_two(tmp_path):
    config = engine_config(tmp_path)
    manager = SessionManager(config)
    session = manager.create(crate_scene(), "pack the pens", seed=0)
    manager.add_preference(session.id, "I want everything kept in the same container")
    run_loop(session, manager.backend(), config)
    assert session.status is SessionStatus.CONVERGED
    assert session.loop_iteration == 2
    iterations = [e for e in session.transcript.entries if e["type"] == "iteration"]
    first_codes = [err["code"] for err in iterations[0]["outcome"]["physical_errors"]]
    assert "ContainerClosed" in first_codes
    assert iterations[1]["outcome"]["ok"]


def test_unresolvable_scene_fails_bounded(tmp_path):
    config = engine_config(tmp_path)
    manager = SessionManager(config)
    session = manager.create(oversized_scene(), "tidy up the table", seed=0)
    with pytest.raises((NoProgress, LoopBudgetExhausted)):
        run_loop(session, manager.backend(), config)
    assert session.status is SessionStatus.FAILED
    assert session.loop_iteration <= config.loop_budget
    assert session.transcript.entries  # transcript retained


def test_budget_exhaustion_path(tmp_path):
    config = engine_config(tmp_path)
    config.loop_budget = 1
    manager = SessionManager(config)
    session = manager.create(crate_scene(), "pack the pens", seed=0)
    manager.add_preference(session.id, "I want everything kept in the same container")
    with pytest.raises(LoopBudgetExhausted):
        run_loop(session, manager.backend(), config)
    assert session.status is SessionStatus.FAILED
    assert session.failure_reason == "loop budget exhausted"


def test_preference_flips_goal_across_iteration(tmp_path):
    config = engine_config(tmp_path)
    manager = SessionManager(config)
    session = manager.create(books_scene(), "tidy up the table", seed=0)
    first = manager.step(session.id)
    assert first["status"] == SessionStatus.AWAITING_HUMAN.value
    goal_before = session.plan.goal
    assert not preference_predicate("no_stacking", goal_before)

    manager.add_preference(
        session.id,
        "I prefer everything to be laid flat on the table rather than stacked together",
    )
    second = manager.step(session.id)
    goal_after = session.plan.goal
    assert preference_predicate("no_stacking", goal_after)
    movable_on_movable = [
        e for e in goal_after.edges
        if e.kind.value == "on" and not goal_after.nodes[e.parent].is_base
    ]
    assert movable_on_movable == []
    assert second["status"] == SessionStatus.AWAITING_HUMAN.value

    third = manager.step(session.id)
    assert third["status"] == SessionStatus.CONVERGED.value
    with pytest.raises(PermissionError):
        manager.step(session.id)


def test_every_human_event_reaches_a_prompt(tmp_path):
    config = engine_config(tmp_path)
    manager = SessionManager(config)
    session = manager.create(books_scene(), "tidy up the table", seed=0)
    manager.step(session.id)
    text = "I prefer everything to be laid flat on the table rather than stacked together"
    manager.add_preference(session.id, text)
    manager.step(session.id)
    event_seq = next(
        e["seq"] for e in session.transcript.entries if e["type"] == "human_event"
    )
    later_calls = [
        e for e in session.transcript.entries
        if e["type"] == "backend_call" and e["seq"] > event_seq
    ]
    assert later_calls
    assert any(text in e["context"] for e in later_calls)


def test_session_persistence_round_trip(tmp_path):
    config = engine_config(tmp_path)
    manager = SessionManager(config)
    session = manager.create(books_scene(), "tidy", seed=0)
    run_loop(session, manager.backend(), config)
    manager.save(session)

    fresh_manager = SessionManager(config)  # restart
    loaded = fresh_manager.get(session.id)
    assert loaded.status is SessionStatus.CONVERGED
    assert loaded.plan is not None
    assert loaded.solution.poses == session.solution.poses
    assert loaded.transcript.to_text() == session.transcript.to_text()


def test_replay_with_human_events_is_byte_identical(tmp_path):
    config = engine_config(tmp_path)
    manager = SessionManager(config)
    session = manager.create(books_scene(), "tidy up the table", seed=0)
    manager.step(session.id)
    manager.add_preference(
        session.id,
        "I prefer everything to be laid flat on the table rather than stacked together",
    )
    manager.step(session.id)
    manager.step(session.id)  # finalize
    assert session.status is SessionStatus.CONVERGED

    replayed = replay_transcript(session.transcript.entries, sessions_dir=str(tmp_path / "r"))
    assert replayed.to_text() == session.transcript.to_text()


def test_adjustment_event_records_pose_deltas(tmp_path):
    config = engine_config(tmp_path)
    manager = SessionManager(config)
    scene = books_scene(2)
    for node_id in scene.movable_ids():
        scene.nodes[node_id].pose = Pose((0.1, 0.1, scene.nodes["table"].top()))
    session = manager.create(scene, "tidy", seed=0)
    adjusted = session.current_scene().copy()
    adjusted.nodes["book0"].pose = adjusted.nodes["book0"].pose.translated(0.2, -0.05)
    result = manager.add_adjustment(session.id, adjusted)
    assert result["pose_deltas"]
    delta = result["pose_deltas"][0]
    assert delta["id"] == "book0"
    assert delta["after"]["position"][0] - delta["before"]["position"][0] == pytest.approx(0.2)


def test_adjustment_identical_scene_rejected(tmp_path):
    config = engine_config(tmp_path)
    manager = SessionManager(config)
    session = manager.create(books_scene(), "tidy", seed=0)
    with pytest.raises(ValueError):
        manager.add_adjustment(session.id, session.current_scene().copy())


def test_adjustment_extracts_preference(tmp_path):
    config = engine_config(tmp_path)
    manager = SessionManager(config)
    session = manager.create(books_scene(3), "tidy up the table", seed=0)
    manager.step(session.id)  # builds a stacked goal
    current = session.current_scene()
    adjusted = current.copy()
    stacked = [
        e for e in adjusted.edges
        if e.kind.value == "on" and not adjusted.nodes[e.parent].is_base
    ]
    assert stacked
    target = stacked[0]
    adjusted.edges = [e for e in adjusted.edges if e.key() != target.key()]
    from tidyloop.scene import Relation, RelationKind, RelationSource

    adjusted.edges.append(
        Relation(RelationKind.ON, "table", target.child, RelationSource.HUMAN_ADJUSTMENT)
    )
    result = manager.add_adjustment(session.id, adjusted)
    assert result["record_id"] is not None
    record = session.store.get(result["record_id"])
    assert "table" in record.text


def test_concurrent_steps_serialize_per_session(tmp_path):
    """Racing steps on one session must serialize; other sessions proceed."""
    import threading

    config = engine_config(tmp_path)
    manager = SessionManager(config)
    session = manager.create(books_scene(), "tidy up the table", seed=0)
    other = manager.create(books_scene(), "tidy up the table", seed=1)

    results: list[dict] = []
    errors: list[Exception] = []

    def hammer(target_id: str) -> None:
        for _ in range(3):
            try:
                results.append(manager.step(target_id))
            except PermissionError:
                pass  # already converged: the 409 path
            except Exception as exc:  # pragma: no cover - failure reporting
                errors.append(exc)

    threads = [
        threading.Thread(target=hammer, args=(session.id,)),
        threading.Thread(target=hammer, args=(session.id,)),
        threading.Thread(target=hammer, args=(other.id,)),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert session.status is SessionStatus.CONVERGED
    assert other.status is SessionStatus.CONVERGED
    # serialization means no iteration was lost or duplicated
    iteration_entries = [e for e in session.transcript.entries if e["type"] == "iteration"]
    assert [e["index"] for e in iteration_entries] == list(
        range(1, len(iteration_entries) + 1)
    )


def test_surface_for_prefers_anchoring_base():
    table = make_node("table", (0.7, 0.4, 0.36), 30.0, label="table",
                      pose=Pose((0, 0, 0)), is_base=True)
    cart = make_node("cart", (0.45, 0.35, 0.3), 25.0, label="cart",
                     pose=Pose((2, 0, 0)), is_base=True, is_container=True)
    item = make_node("box0", (0.05, 0.05, 0.05), 0.3, label="box")
    from tidyloop.scene import Relation, RelationKind, RelationSource

    g = SceneGraph(
        nodes=[table, cart, item],
        edges=[Relation(RelationKind.IN, "cart", "box0", RelationSource.PLANNER)],
    )
    assert surface_for(g) == "cart"
    g2 = SceneGraph(nodes=[table.copy(), cart.copy(), item.copy()],
                    edges=[on("table", "box0")])
    assert surface_for(g2) == "table"
