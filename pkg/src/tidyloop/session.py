"""Planning sessions: the plan/synthesize/execute/feedback loop, transcripts,
disk persistence, and deterministic replay.

A session owns one scene and instruction.  Every backend call, human event,
and loop iteration is appended to the transcript; with the mock backend and
a fixed seed the whole transcript replays byte-for-byte.
"""

from __future__ import annotations

import json
import os
import threading
import uuid
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping

from .backends import BackendResponse, PromptBundle, make_backend
from .config import EngineConfig
from .errors import (
    LoopBudgetExhausted,
    NoProgress,
    SceneGraphError,
    TidyloopError,
)
from .events import EventKind, EventOrigin, FeedbackEvent
from .planner import (
    ExecutionOutcome,
    Plan,
    execute_symbolically,
    failure_signature,
    plan_task,
    replan_with_feedback,
)
from .preferences import PreferenceStore
from .scene import SceneGraph, canonical_dumps
from .synthesis import PoseSolution, synthesize_scene


class SessionStatus(str, Enum):
    PLANNING = "planning"
    AWAITING_HUMAN = "awaiting_human"
    CONVERGED = "converged"
    FAILED = "failed"


class Transcript:
    """Ordered, replayable log of everything a session did."""

    def __init__(self, entries: Iterable[Mapping[str, Any]] = ()):
        self.entries: list[dict[str, Any]] = [dict(e) for e in entries]

    def append(self, entry_type: str, **fields: Any) -> int:
        seq = len(self.entries)
        entry = {"seq": seq, "type": entry_type}
        entry.update(fields)
        self.entries.append(entry)
        return seq

    # CallRecorder interface used by the planner
    def record(self, bundle: PromptBundle, response: BackendResponse) -> str:
        seq = self.append(
            "backend_call",
            stage=bundle.stage.value,
            system=bundle.system,
            context=bundle.context,
            raw_response=response.raw,
            usage=dict(response.usage),
        )
        return f"call-{seq:04d}"

    def to_text(self) -> str:
        return "".join(canonical_dumps(e) + "\n" for e in self.entries)

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def read(cls, path: str) -> "Transcript":
        entries = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    entries.append(json.loads(line))
        return cls(entries)


def surface_for(goal: SceneGraph, fallback: str | None = None) -> str:
    """The base most of the goal's movables are anchored to; prefers a table
    on ties, then the largest footprint."""
    counts: dict[str, int] = {}
    for node_id in goal.movable_ids():
        current = node_id
        for _ in range(len(goal.nodes) + 1):
            edge = goal.support_parent(current)
            if edge is None:
                break
            if edge.parent in goal.nodes and goal.nodes[edge.parent].is_base:
                counts[edge.parent] = counts.get(edge.parent, 0) + 1
                break
            current = edge.parent
    bases = goal.base_ids()
    if not bases:
        raise SceneGraphError("scene has no base object")

    def rank(base_id: str):
        node = goal.nodes[base_id]
        area = 4.0 * node.half_extents[0] * node.half_extents[1]
        return (
            -counts.get(base_id, 0),
            0 if node.label.lower() == "table" else 1,
            -area,
            base_id,
        )

    if fallback is not None and fallback in counts:
        return fallback
    return sorted(bases, key=rank)[0]


@dataclass
class Session:
    id: str
    scene: SceneGraph
    instruction: str
    seed: int
    store: PreferenceStore
    transcript: Transcript = field(default_factory=Transcript)
    plan: Plan | None = None
    outcome: ExecutionOutcome | None = None
    solution: PoseSolution | None = None
    pending_events: list[FeedbackEvent] = field(default_factory=list)
    loop_iteration: int = 0
    status: SessionStatus = SessionStatus.PLANNING
    last_failure_signature: str | None = None
    failure_reason: str | None = None
    event_clock: int = 0

    def next_event_seq(self) -> int:
        self.event_clock += 1
        return self.event_clock

    @property
    def satisfied(self) -> bool:
        """Last iteration succeeded and nothing is pending from the human."""
        return (
            self.outcome is not None
            and self.outcome.ok
            and self.solution is not None
            and self.solution.feasible
            and not self.pending_events
        )

    def current_scene(self) -> SceneGraph:
        """The goal scene with synthesized poses, or the initial scene."""
        if self.plan is None:
            return self.scene
        goal = self.plan.goal
        if self.solution is not None:
            poses = {i: p for i, p in self.solution.poses.items() if i in goal.nodes}
            return goal.with_poses(poses)
        return goal

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "scene": self.scene.to_document(),
            "instruction": self.instruction,
            "seed": self.seed,
            "store": self.store.to_dict(),
            "plan": self.plan.to_dict() if self.plan else None,
            "outcome": self.outcome.to_dict() if self.outcome else None,
            "solution": self.solution.to_dict() if self.solution else None,
            "pending_events": [e.to_dict() for e in self.pending_events],
            "loop_iteration": self.loop_iteration,
            "status": self.status.value,
            "last_failure_signature": self.last_failure_signature,
            "failure_reason": self.failure_reason,
            "event_clock": self.event_clock,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], transcript: Transcript) -> "Session":
        return cls(
            id=data["id"],
            scene=SceneGraph.from_document(data["scene"]),
            instruction=data["instruction"],
            seed=int(data["seed"]),
            store=PreferenceStore.from_dict(data["store"]),
            transcript=transcript,
            plan=Plan.from_dict(data["plan"]) if data.get("plan") else None,
            outcome=ExecutionOutcome.from_dict(data["outcome"]) if data.get("outcome") else None,
            solution=PoseSolution.from_dict(data["solution"]) if data.get("solution") else None,
            pending_events=[FeedbackEvent.from_dict(e) for e in data.get("pending_events", [])],
            loop_iteration=int(data.get("loop_iteration", 0)),
            status=SessionStatus(data.get("status", "planning")),
            last_failure_signature=data.get("last_failure_signature"),
            failure_reason=data.get("failure_reason"),
            event_clock=int(data.get("event_clock", 0)),
        )


def run_iteration(session: Session, backend, config: EngineConfig) -> None:
    """One pass of the loop: (re)plan, execute symbolically, synthesize,
    collect physical feedback.  Raises NoProgress or LoopBudgetExhausted
    after marking the session failed (transcript retained)."""
    if session.loop_iteration >= config.loop_budget:
        session.status = SessionStatus.FAILED
        session.failure_reason = "loop budget exhausted"
        raise LoopBudgetExhausted(
            f"session {session.id} exhausted its {config.loop_budget}-iteration budget"
        )
    iteration = session.loop_iteration + 1
    prefs = session.store.prompt_records()
    events = list(session.pending_events)
    session.pending_events = []

    if session.plan is None and session.outcome is None:
        plan = plan_task(
            session.scene,
            session.instruction,
            backend,
            prefs=prefs,
            feedback=events,
            recorder=session.transcript,
        )
    else:
        # the failure this replan is trying to fix; compared against the one
        # the previous replan tried to fix for no-progress detection
        current_signature = failure_signature(session.outcome, events)
        try:
            plan = replan_with_feedback(
                session.scene,
                session.plan,
                session.outcome,
                prefs,
                backend,
                events=events,
                instruction=session.instruction,
                last_failure_signature=session.last_failure_signature,
                recorder=session.transcript,
            )
        except NoProgress:
            session.status = SessionStatus.FAILED
            session.failure_reason = "no progress between replans"
            session.transcript.append(
                "iteration",
                index=iteration,
                error="NoProgress",
            )
            raise
        session.last_failure_signature = current_signature

    outcome = execute_symbolically(session.scene, plan)
    solution = None
    physical_events: list[FeedbackEvent] = list(outcome.events)
    if outcome.ok:
        synth_cfg = replace(config.synthesis, seed=config.synthesis.seed + session.seed + iteration)
        try:
            solution = synthesize_scene(plan.goal, surface_for(plan.goal), synth_cfg)
        except TidyloopError as exc:
            physical_events.append(
                FeedbackEvent(
                    kind=EventKind.PRECONDITION_FAILURE,
                    origin=EventOrigin.SYNTHESIZER,
                    payload={"code": type(exc).__name__, "detail": str(exc)},
                )
            )
        else:
            if not solution.feasible:
                physical_events.extend(solution.feedback)

    session.plan = plan
    session.outcome = outcome
    session.solution = solution
    session.loop_iteration = iteration
    failed = not outcome.ok or solution is None or not solution.feasible
    if failed:
        session.pending_events.extend(physical_events)
    session.transcript.append(
        "iteration",
        index=iteration,
        plan=plan.to_dict(),
        outcome=outcome.to_dict(),
        solution=solution.to_dict() if solution else None,
        events=[e.to_dict() for e in physical_events],
    )


def run_loop(session: Session, backend, config: EngineConfig) -> Session:
    """Iterate until the plan is symbolically valid, physically feasible, and
    no feedback is pending; bounded by the configured loop budget."""
    if session.status not in (SessionStatus.PLANNING, SessionStatus.AWAITING_HUMAN):
        raise TidyloopError(f"session {session.id} is {session.status.value}")
    session.status = SessionStatus.PLANNING
    while True:
        run_iteration(session, backend, config)
        if session.satisfied:
            session.status = SessionStatus.CONVERGED
            session.transcript.append("status", status=session.status.value)
            return session
        if session.loop_iteration >= config.loop_budget:
            session.status = SessionStatus.FAILED
            session.failure_reason = "loop budget exhausted"
            session.transcript.append("status", status=session.status.value)
            raise LoopBudgetExhausted(
                f"session {session.id} exhausted its {config.loop_budget}-iteration budget"
            )


class SessionManager:
    """Disk-backed session registry with per-session mutual exclusion."""

    def __init__(self, config: EngineConfig):
        self.config = config
        os.makedirs(config.sessions_dir, exist_ok=True)
        self._sessions: dict[str, Session] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._registry_lock = threading.Lock()
        self._backend = None

    # -- infrastructure -----------------------------------------------------

    def backend(self):
        if self._backend is None:
            self._backend = make_backend(self.config.backend_kind, self.config.backend_settings)
        return self._backend

    def lock(self, session_id: str) -> threading.Lock:
        with self._registry_lock:
            return self._locks.setdefault(session_id, threading.Lock())

    def _paths(self, session_id: str) -> tuple[str, str]:
        base = os.path.join(self.config.sessions_dir, session_id)
        return base + ".json", base + ".transcript.jsonl"

    def save(self, session: Session) -> None:
        state_path, transcript_path = self._paths(session.id)
        with open(state_path, "w", encoding="utf-8") as fh:
            fh.write(canonical_dumps(session.to_dict()))
            fh.write("\n")
        session.transcript.write(transcript_path)

    def get(self, session_id: str) -> Session:
        if session_id in self._sessions:
            return self._sessions[session_id]
        state_path, transcript_path = self._paths(session_id)
        if not os.path.exists(state_path):
            raise KeyError(session_id)
        with open(state_path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        transcript = Transcript.read(transcript_path) if os.path.exists(transcript_path) else Transcript()
        session = Session.from_dict(data, transcript)
        self._sessions[session_id] = session
        return session

    # -- lifecycle -------------------------------------------------------------

    def create(
        self,
        scene: SceneGraph,
        instruction: str,
        seed: int | None = None,
        session_id: str | None = None,
    ) -> Session:
        report = scene.validate()
        if not report.ok:
            raise SceneGraphError(
                f"scene fails validation: {sorted(report.codes())}"
            )
        session = Session(
            id=session_id or uuid.uuid4().hex[:12],
            scene=scene,
            instruction=instruction,
            seed=self.config.synthesis.seed if seed is None else seed,
            store=PreferenceStore(token_budget=self.config.token_budget),
        )
        # deployment-specific keys (paths, ports) stay out of the replayable record
        config_snapshot = self.config.to_dict()
        config_snapshot.pop("sessions_dir", None)
        config_snapshot.pop("port", None)
        session.transcript.append(
            "session_start",
            scene=scene.to_document(),
            instruction=instruction,
            seed=session.seed,
            backend=self.config.backend_kind,
            config=config_snapshot,
        )
        self._sessions[session.id] = session
        self.save(session)
        return session

    # -- human feedback ----------------------------------------------------------

    def add_preference(self, session_id: str, text: str) -> dict[str, Any]:
        with self.lock(session_id):
            session = self.get(session_id)
            record = session.store.ingest_instruction(text, backend=self.backend())
            event = FeedbackEvent(
                kind=EventKind.INSTRUCTION,
                origin=EventOrigin.HUMAN,
                payload={"text": text, "record_id": record.id},
                seq=session.next_event_seq(),
            )
            session.pending_events.append(event)
            if session.status is SessionStatus.CONVERGED:
                session.status = SessionStatus.AWAITING_HUMAN
            session.transcript.append("human_event", event=event.to_dict())
            self.save(session)
            return {"record_id": record.id, "status": session.status.value}

    def add_adjustment(self, session_id: str, adjusted: SceneGraph) -> dict[str, Any]:
        with self.lock(session_id):
            session = self.get(session_id)
            current = session.current_scene()
            changes = current.diff(adjusted)
            pose_deltas = []
            for node_id in sorted(current.nodes):
                before = current.nodes[node_id].pose
                after = adjusted.nodes[node_id].pose
                if before is None and after is None:
                    continue
                if before is None or after is None:
                    pose_deltas.append(
                        {
                            "id": node_id,
                            "before": before.to_dict() if before else None,
                            "after": after.to_dict() if after else None,
                        }
                    )
                    continue
                moved = any(
                    abs(a - b) > 1e-9
                    for a, b in zip(before.position, after.position)
                ) or abs(before.yaw - after.yaw) > 1e-9
                if moved:
                    pose_deltas.append(
                        {"id": node_id, "before": before.to_dict(), "after": after.to_dict()}
                    )
            if not changes and not pose_deltas:
                raise ValueError("EmptyDiff: the adjusted scene is identical to the current one")

            record_id = None
            if changes:
                record = session.store.extract_from_adjustment(
                    changes, self.backend(), scene=current
                )
                record_id = record.id
            event = FeedbackEvent(
                kind=EventKind.ADJUSTMENT,
                origin=EventOrigin.HUMAN,
                payload={
                    "changes": [c.to_dict() for c in changes],
                    "pose_deltas": pose_deltas,
                    "record_id": record_id,
                    "adjusted_scene": adjusted.to_document(),
                },
                seq=session.next_event_seq(),
            )
            session.pending_events.append(event)
            if session.status is SessionStatus.CONVERGED:
                session.status = SessionStatus.AWAITING_HUMAN
            session.transcript.append("human_event", event=event.to_dict())
            self.save(session)
            return {"record_id": record_id, "pose_deltas": pose_deltas, "status": session.status.value}

    # -- stepping ------------------------------------------------------------------

    def step(self, session_id: str) -> dict[str, Any]:
        """One HTTP-facing loop step.  A satisfied session with nothing
        pending converges; otherwise one iteration runs and the session
        waits for the human again."""
        with self.lock(session_id):
            session = self.get(session_id)
            if session.status in (SessionStatus.CONVERGED, SessionStatus.FAILED):
                raise PermissionError(f"session is {session.status.value}")
            events: list[dict[str, Any]] = []
            if session.satisfied:
                session.status = SessionStatus.CONVERGED
                session.transcript.append("status", status=session.status.value)
            else:
                try:
                    run_iteration(session, self.backend(), self.config)
                except (NoProgress, LoopBudgetExhausted):
                    self.save(session)
                    return self._step_payload(session, [])
                events = [e.to_dict() for e in session.pending_events]
                session.status = (
                    SessionStatus.AWAITING_HUMAN if session.satisfied else SessionStatus.PLANNING
                )
                if (
                    session.status is SessionStatus.PLANNING
                    and session.loop_iteration >= self.config.loop_budget
                ):
                    session.status = SessionStatus.FAILED
                    session.failure_reason = "loop budget exhausted"
                    session.transcript.append("status", status=session.status.value)
            self.save(session)
            return self._step_payload(session, events)

    @staticmethod
    def _step_payload(session: Session, events: list[dict[str, Any]]) -> dict[str, Any]:
        return {
            "status": session.status.value,
            "loop_iteration": session.loop_iteration,
            "events": events,
            "feasible": bool(session.solution.feasible) if session.solution else False,
            "outcome_ok": bool(session.outcome.ok) if session.outcome else False,
            "breakdown": session.solution.breakdown.to_dict() if session.solution else None,
            "failure_reason": session.failure_reason,
        }


# --- deterministic replay -----------------------------------------------------------


def replay_transcript(entries: list[Mapping[str, Any]], sessions_dir: str) -> Transcript:
    """Re-run a recorded session from its transcript under the mock backend."""
    if not entries or entries[0].get("type") != "session_start":
        raise TidyloopError("transcript does not begin with a session_start entry")
    start = entries[0]
    config = EngineConfig.from_dict(start.get("config", {}))
    config = replace(config, sessions_dir=sessions_dir, backend_kind="mock")
    manager = SessionManager(config)
    session = manager.create(
        SceneGraph.from_document(start["scene"]),
        start["instruction"],
        seed=int(start["seed"]),
        session_id="replay",
    )
    for entry in entries[1:]:
        entry_type = entry.get("type")
        if entry_type == "human_event":
            event = entry["event"]
            if event["kind"] == EventKind.INSTRUCTION.value:
                manager.add_preference(session.id, event["payload"]["text"])
            elif event["kind"] == EventKind.ADJUSTMENT.value:
                adjusted = SceneGraph.from_document(event["payload"]["adjusted_scene"])
                manager.add_adjustment(session.id, adjusted)
        elif entry_type == "iteration":
            if session.status in (SessionStatus.CONVERGED, SessionStatus.FAILED):
                continue
            try:
                manager.step(session.id)
            except (NoProgress, LoopBudgetExhausted):
                pass
        elif entry_type == "status":
            if (
                entry.get("status") == SessionStatus.CONVERGED.value
                and session.status is not SessionStatus.CONVERGED
                and session.satisfied
            ):
                manager.step(session.id)
    return session.transcript
