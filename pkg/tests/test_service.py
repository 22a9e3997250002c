from __future__ import annotations

import pytest
from fastapi.testclient import TestClient

from tidyloop.config import EngineConfig
from tidyloop.service import create_app


@pytest.fixture
def client(tmp_path):
    config = EngineConfig.from_dict(
        {
            "sessions_dir": str(tmp_path / "sessions"),
            "synthesis": {"seed": 3, "iterations_per_group": 400, "restarts": 2},
        }
    )
    app = create_app(config)
    with TestClient(app) as test_client:
        yield test_client


def scene_doc(with_poses=True, books=3):
    table_top = 0.72
    nodes = [
        {
            "id": "table", "label": "table", "half_extents": [0.7, 0.4, 0.36],
            "mass": 30.0, "is_base": True,
            "pose": {"position": [0.0, 0.0, 0.0], "yaw": 0.0},
        }
    ]
    edges = []
    for i in range(books):
        node = {
            "id": f"book{i}", "label": "book",
            "half_extents": [0.08, 0.06, 0.015], "mass": 0.4,
        }
        if with_poses:
            node["pose"] = {"position": [0.1 * i, 0.05, table_top], "yaw": 0.0}
        nodes.append(node)
        edges.append({"kind": "on", "parent": "table", "child": f"book{i}",
                      "source": "initial_observation"})
    return {"nodes": nodes, "edges": edges}


def create_session(client, **kw):
    response = client.post(
        "/sessions", json={"scene": scene_doc(**kw), "instruction": "tidy up the table"}
    )
    assert response.status_code == 201, response.text
    return response.json()["id"]


def test_create_and_fetch_fresh_scene(client):
    session_id = create_session(client, with_poses=False)
    response = client.get(f"/sessions/{session_id}/scene")
    assert response.status_code == 200
    doc = response.json()
    movables = [n for n in doc["nodes"] if not n["is_base"]]
    assert movables and all(n["pose"] is None for n in movables)


def test_unknown_session_404(client):
    assert client.get("/sessions/nope/scene").status_code == 404
    assert client.post("/sessions/nope/step").status_code == 404
    assert client.post("/sessions/nope/preference", json={"text": "x"}).status_code == 404


def test_malformed_body_400(client):
    session_id = create_session(client)
    response = client.post(f"/sessions/{session_id}/preference", json={"nope": 1})
    assert response.status_code == 400
    assert response.json()["error"] == "MalformedBody"


def test_step_flow_and_409(client):
    session_id = create_session(client)
    first = client.post(f"/sessions/{session_id}/step")
    assert first.status_code == 200
    assert first.json()["status"] == "awaiting_human"
    assert first.json()["feasible"] is True

    second = client.post(f"/sessions/{session_id}/step")
    assert second.json()["status"] == "converged"

    third = client.post(f"/sessions/{session_id}/step")
    assert third.status_code == 409


def test_scene_carries_synthesized_poses_after_step(client):
    session_id = create_session(client)
    client.post(f"/sessions/{session_id}/step")
    doc = client.get(f"/sessions/{session_id}/scene").json()
    movables = [n for n in doc["nodes"] if not n["is_base"]]
    assert all(n["pose"] is not None for n in movables)
    # resting on or above the table top (books stack by default)
    assert all(n["pose"]["position"][2] >= 0.72 - 1e-9 for n in movables)
    assert any(abs(n["pose"]["position"][2] - 0.72) < 1e-9 for n in movables)


def test_preference_round_trip_into_prompt(client):
    session_id = create_session(client)
    client.post(f"/sessions/{session_id}/step")
    text = "I prefer everything to be laid flat on the table rather than stacked together"
    accepted = client.post(f"/sessions/{session_id}/preference", json={"text": text})
    assert accepted.status_code == 202
    assert accepted.json()["record_id"]

    client.post(f"/sessions/{session_id}/step")
    transcript = client.get(f"/sessions/{session_id}/transcript").json()["entries"]
    event_seq = next(e["seq"] for e in transcript if e["type"] == "human_event")
    prompts_after = [
        e["context"] for e in transcript
        if e["type"] == "backend_call" and e["seq"] > event_seq
    ]
    assert any(text in context for context in prompts_after)


def test_empty_preference_400(client):
    session_id = create_session(client)
    response = client.post(f"/sessions/{session_id}/preference", json={"text": "   "})
    assert response.status_code == 400


def test_adjustment_identical_scene_400(client):
    session_id = create_session(client)
    current = client.get(f"/sessions/{session_id}/scene").json()
    response = client.post(f"/sessions/{session_id}/adjustment", json={"scene": current})
    assert response.status_code == 400
    assert response.json()["error"] == "EmptyDiff"


def test_adjustment_records_pose_delta(client):
    session_id = create_session(client)
    current = client.get(f"/sessions/{session_id}/scene").json()
    for node in current["nodes"]:
        if node["id"] == "book0":
            node["pose"]["position"][0] += 0.25
    response = client.post(f"/sessions/{session_id}/adjustment", json={"scene": current})
    assert response.status_code == 202
    deltas = response.json()["pose_deltas"]
    assert len(deltas) == 1 and deltas[0]["id"] == "book0"
    moved = deltas[0]["after"]["position"][0] - deltas[0]["before"]["position"][0]
    assert moved == pytest.approx(0.25)


def test_adjustment_relation_change_extracts_preference(client):
    session_id = create_session(client)
    client.post(f"/sessions/{session_id}/step")
    current = client.get(f"/sessions/{session_id}/scene").json()
    # pull the top book out of the stack onto the table
    stacked = [
        e for e in current["edges"]
        if e["kind"] == "on" and e["parent"] != "table"
    ]
    assert stacked
    victim = stacked[0]
    current["edges"] = [
        e for e in current["edges"]
        if not (e["kind"] == "on" and e["child"] == victim["child"])
    ]
    current["edges"].append(
        {"kind": "on", "parent": "table", "child": victim["child"], "source": "human_adjustment"}
    )
    response = client.post(f"/sessions/{session_id}/adjustment", json={"scene": current})
    assert response.status_code == 202
    assert response.json()["record_id"]

    # the next step replans under the adjustment-derived preference
    step = client.post(f"/sessions/{session_id}/step")
    assert step.status_code == 200
    info = client.get(f"/sessions/{session_id}").json()
    assert info["status"] in ("awaiting_human", "planning")


def test_sessions_are_independent(client):
    a = create_session(client)
    b = create_session(client)
    client.post(f"/sessions/{a}/step")
    info_b = client.get(f"/sessions/{b}").json()
    assert info_b["loop_iteration"] == 0
