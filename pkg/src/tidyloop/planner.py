"""Top-down task planner and symbolic plan executor.

The pipeline categorizes objects into N groups (plus one category-level
graph), plans inter-group placement, then intra-group operations.  Plans
are replayed symbolically against precondition rules; failures keep their
source-tagged relation context so replanning can show the backend exactly
which relations broke and what surrounded them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol, Sequence

from .actions import (
    GROUP_PREFIX,
    ActionStep,
    Primitive,
    is_placeholder,
    placeholder_category,
)
from .backends import PlannerBackend, PromptBundle, Stage, assemble
from .errors import MalformedResponse, NoProgress, ParseError, PlanningError
from .events import EventKind, EventOrigin, FeedbackEvent, PREFERENCE_KINDS
from .scene import (
    GroupDag,
    ObjectNode,
    Relation,
    RelationKind,
    RelationSource,
    SceneGraph,
    SUPPORT_KINDS,
    ORIENTATION_KINDS,
    canonical_dumps,
)

MAX_FORMAT_RETRIES = 2


class CallRecorder(Protocol):
    def record(self, bundle: PromptBundle, response: Any) -> str: ...


@dataclass
class CategoryGraph:
    """The +1 graph of the N+1 decomposition: one node per category."""

    categories: list[str]
    edges: list[tuple[str, str, str]] = field(default_factory=list)  # (kind, parent, child)

    def to_dict(self) -> dict[str, Any]:
        return {"categories": list(self.categories), "edges": [list(e) for e in self.edges]}


@dataclass
class Plan:
    steps: list[ActionStep]
    goal: SceneGraph
    provenance: dict[int, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "steps": [s.to_dict() for s in self.steps],
            "goal": self.goal.to_document(),
            "provenance": {str(k): v for k, v in sorted(self.provenance.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Plan":
        return cls(
            steps=[ActionStep.from_dict(s) for s in data["steps"]],
            goal=SceneGraph.from_document(data["goal"]),
            provenance={int(k): v for k, v in data.get("provenance", {}).items()},
        )


@dataclass
class ExecutionOutcome:
    ok: bool
    failed_step: int | None
    events: list[FeedbackEvent]
    logical_errors: list[dict[str, Any]]
    physical_errors: list[dict[str, Any]]
    final_graph: SceneGraph | None = None

    def failure_signature(self) -> str:
        """Stable identity of what failed, for no-progress detection."""
        return canonical_dumps(
            {
                "failed_step": self.failed_step,
                "logical": sorted(canonical_dumps(e) for e in self.logical_errors),
                "physical": sorted(canonical_dumps(e) for e in self.physical_errors),
            }
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "ok": self.ok,
            "failed_step": self.failed_step,
            "events": [e.to_dict() for e in self.events],
            "logical_errors": list(self.logical_errors),
            "physical_errors": list(self.physical_errors),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExecutionOutcome":
        return cls(
            ok=bool(data["ok"]),
            failed_step=data.get("failed_step"),
            events=[FeedbackEvent.from_dict(e) for e in data.get("events", [])],
            logical_errors=list(data.get("logical_errors", [])),
            physical_errors=list(data.get("physical_errors", [])),
        )


# --- backend invocation with format-retry --------------------------------------


def _complete_with_retry(
    backend: PlannerBackend,
    bundle: PromptBundle,
    recorder: CallRecorder | None = None,
):
    """Call the backend; on grammar violations, re-prompt with the error
    appended, at most MAX_FORMAT_RETRIES times."""
    attempt_bundle = bundle
    last_error: ParseError | None = None
    for _ in range(1 + MAX_FORMAT_RETRIES):
        try:
            response = backend.complete(attempt_bundle)
        except ParseError as exc:
            last_error = exc
            attempt_bundle = PromptBundle(
                system=bundle.system,
                context=bundle.context + f"\n## FORMAT ERROR\n{exc}",
                stage=bundle.stage,
            )
            continue
        call_id = recorder.record(attempt_bundle, response) if recorder else ""
        return response, call_id
    raise MalformedResponse(f"backend output stayed malformed after retries: {last_error}")


# --- categorize -----------------------------------------------------------------


def categorize(
    objects: Sequence[ObjectNode],
    backend: PlannerBackend,
    scene: SceneGraph | None = None,
    instruction: str = "",
    prefs: Sequence[Any] = (),
    feedback: Sequence[FeedbackEvent] = (),
    recorder: CallRecorder | None = None,
) -> tuple[list[GroupDag], CategoryGraph, str]:
    """Partition movable objects into category groups (the N graphs) and
    return the empty category-level graph (the +1) alongside the call id."""
    if not objects:
        raise PlanningError("categorize needs at least one object")
    if scene is None:
        scene = SceneGraph(nodes=list(objects))
    bundle = assemble(Stage.CATEGORIZE, scene, instruction, prefs, feedback)
    movable_ids = {o.id for o in objects if not o.is_base}

    last_problem = ""
    for attempt in range(1 + MAX_FORMAT_RETRIES):
        response, call_id = _complete_with_retry(backend, bundle, recorder)
        payload = response.parsed
        assigned: list[str] = []
        for group in payload["groups"]:
            assigned.extend(group["members"])
        if sorted(assigned) == sorted(movable_ids):
            groups = [
                GroupDag(category=g["category"], member_ids=sorted(g["members"]))
                for g in sorted(payload["groups"], key=lambda g: g["category"])
            ]
            graph = CategoryGraph(categories=[g.category for g in groups])
            return groups, graph, call_id
        last_problem = (
            f"groups must partition the movable objects exactly once; "
            f"got {sorted(assigned)} for {sorted(movable_ids)}"
        )
        bundle = PromptBundle(
            system=bundle.system,
            context=bundle.context + f"\n## FORMAT ERROR\n{last_problem}",
            stage=bundle.stage,
        )
    raise MalformedResponse(last_problem)


# --- placement stages -------------------------------------------------------------


def _steps_from_payload(payload: Mapping[str, Any]) -> list[ActionStep]:
    return [ActionStep.from_dict(s) for s in payload["steps"]]


def plan_intergroup(
    groups: Sequence[GroupDag],
    backend: PlannerBackend,
    scene: SceneGraph,
    instruction: str = "",
    prefs: Sequence[Any] = (),
    feedback: Sequence[FeedbackEvent] = (),
    recorder: CallRecorder | None = None,
) -> tuple[list[ActionStep], str]:
    """Global placement for the N categories: put_on/put_near over group
    placeholders plus optional orientation relations."""
    grouped_scene = SceneGraph(
        nodes=[n.copy() for n in scene.nodes.values()],
        edges=list(scene.edges),
        groups=list(groups),
    )
    bundle = assemble(Stage.INTERGROUP, grouped_scene, instruction, prefs, feedback)
    response, call_id = _complete_with_retry(backend, bundle, recorder)
    return _steps_from_payload(response.parsed), call_id


def plan_intragroup(
    group: GroupDag,
    backend: PlannerBackend,
    scene: SceneGraph,
    instruction: str = "",
    prefs: Sequence[Any] = (),
    feedback: Sequence[FeedbackEvent] = (),
    recorder: CallRecorder | None = None,
) -> tuple[list[ActionStep], str]:
    """Detailed operations inside one group; singleton groups need nothing."""
    if len(group.member_ids) < 2:
        return [], ""
    grouped_scene = SceneGraph(
        nodes=[n.copy() for n in scene.nodes.values()],
        edges=list(scene.edges),
        groups=list(scene.groups),
    )
    bundle = assemble(
        Stage.INTRAGROUP,
        grouped_scene,
        instruction,
        prefs,
        feedback,
        target_group=group.category,
    )
    response, call_id = _complete_with_retry(backend, bundle, recorder)
    return _steps_from_payload(response.parsed), call_id


# --- symbolic executor ---------------------------------------------------------


def _enclosing_closed_container(g: SceneGraph, node_id: str) -> str | None:
    """Walk the support chain upward; return the first closed container the
    node sits inside, if any."""
    current = node_id
    for _ in range(len(g.nodes) + 1):
        edge = g.support_parent(current)
        if edge is None:
            return None
        if edge.kind is RelationKind.IN:
            container = g.nodes.get(edge.parent)
            if container is not None and not container.states.get("open", False):
                return edge.parent
        current = edge.parent
    return None


def _remove_support_edge(g: SceneGraph, child: str) -> None:
    g.edges = [e for e in g.edges if not (e.kind in SUPPORT_KINDS and e.child == child)]


class _Execution:
    """Working state for one symbolic replay."""

    def __init__(self, initial: SceneGraph):
        self.graph = initial.copy()
        self.memberships: dict[str, list[str]] = {}
        for group in initial.groups:
            self.memberships[GROUP_PREFIX + group.category] = sorted(group.member_ids)

    def resolve_items(self, arg: str) -> list[str]:
        if is_placeholder(arg):
            return list(self.memberships.get(arg, []))
        return [arg]

    def representative(self, arg: str) -> str | None:
        if is_placeholder(arg):
            members = self.memberships.get(arg, [])
            return members[0] if members else None
        return arg


def _logical_errors_for_step(
    step: ActionStep, state: _Execution, index: int
) -> list[dict[str, Any]]:
    errors: list[dict[str, Any]] = []

    def err(code: str, detail: str, subject: str = "") -> None:
        errors.append({"code": code, "step_index": index, "detail": detail, "subject": subject})

    if step.primitive is Primitive.GROUP:
        placeholder, member = step.args
        if not is_placeholder(placeholder):
            err("BadPlaceholder", f"group step target {placeholder!r} lacks the group: prefix", placeholder)
        if is_placeholder(member):
            err("BadPlaceholder", "group step member must be a concrete id", member)
        elif member not in state.graph.nodes:
            err("UnknownId", f"unknown object {member!r}", member)
        return errors

    for position, arg in enumerate(step.args):
        if is_placeholder(arg):
            allowed = step.primitive is Primitive.PUT_NEAR or (
                position == 1 and step.primitive in (Primitive.PUT_ON, Primitive.PUT_IN)
            )
            if not allowed:
                err("BadPlaceholder", f"{step.primitive.value} cannot take placeholder {arg!r}", arg)
            elif arg not in state.memberships:
                err("UnknownId", f"unknown group placeholder {arg!r}", arg)
        elif arg not in state.graph.nodes:
            err("UnknownId", f"unknown object {arg!r}", arg)
    return errors


def _check_and_apply(
    step: ActionStep, state: _Execution, index: int
) -> list[dict[str, Any]]:
    """Physical precondition checks; applies the effect when they pass."""
    g = state.graph

    def failure(code: str, detail: str, objects: list[str]) -> list[dict[str, Any]]:
        return [
            {
                "code": code,
                "step_index": index,
                "detail": detail,
                "objects": objects,
                "relations": [e.to_dict() for e in g.relations_incident(objects)],
            }
        ]

    if step.primitive is Primitive.GROUP:
        placeholder, member = step.args
        members = state.memberships.setdefault(placeholder, [])
        if member not in members:
            members.append(member)
            members.sort()
        return []

    if step.primitive in (Primitive.OPEN, Primitive.CLOSE):
        target = step.args[0]
        node = g.nodes[target]
        wants_open = step.primitive is Primitive.OPEN
        if not node.is_container:
            return failure("NotAContainer", f"{target!r} is not a container", [target])
        enclosing = _enclosing_closed_container(g, target)
        if enclosing is not None:
            return failure(
                "Enclosed", f"{target!r} is shut inside {enclosing!r}", [target, enclosing]
            )
        if node.states.get("open", False) == wants_open:
            code = "AlreadyOpen" if wants_open else "AlreadyClosed"
            return failure(code, f"{target!r} is already {'open' if wants_open else 'closed'}", [target])
        node.states["open"] = wants_open
        return []

    if step.primitive is Primitive.SLICE:
        target = step.args[0]
        g.nodes[target].states["sliced"] = True
        return []

    dest_arg, item_arg = step.args
    items = state.resolve_items(item_arg)
    if step.primitive is Primitive.PUT_NEAR:
        anchor = state.representative(dest_arg)
        if anchor is None:
            return failure("UnknownId", f"empty group placeholder {dest_arg!r}", [dest_arg])
        for item in items:
            if item == anchor:
                continue
            relation = Relation(
                RelationKind.NEAR, anchor, item, RelationSource.PLANNER, step_index=index
            )
            if relation.key() not in g.edge_keys():
                g.edges.append(relation)
        _apply_step_relation(step, state, index)
        return []

    dest = dest_arg
    kind = RelationKind.ON if step.primitive is Primitive.PUT_ON else RelationKind.IN
    dest_node = g.nodes[dest]
    if kind is RelationKind.IN:
        if not dest_node.is_container:
            return failure("NotAContainer", f"{dest!r} is not a container", [dest])
        if not dest_node.states.get("open", False):
            return failure(
                "ContainerClosed",
                f"cannot place inside {dest!r} before it is opened",
                [dest],
            )
    enclosing = _enclosing_closed_container(g, dest)
    if enclosing is not None:
        return failure(
            "DestinationEnclosed",
            f"destination {dest!r} is shut inside {enclosing!r}",
            [dest, enclosing],
        )
    for item in items:
        node = g.nodes[item]
        if node.is_base:
            return failure("BaseImmovable", f"{item!r} is a base object", [item])
        enclosing = _enclosing_closed_container(g, item)
        if enclosing is not None and enclosing != dest:
            return failure(
                "ItemEnclosed", f"{item!r} is shut inside {enclosing!r}", [item, enclosing]
            )
        if dest == item or dest in ({item} | g.support_subtree(item)):
            return failure(
                "CycleCreated", f"{dest!r} is supported by {item!r}", [dest, item]
            )
        _remove_support_edge(g, item)
        g.edges.append(Relation(kind, dest, item, RelationSource.PLANNER, step_index=index))
    _apply_step_relation(step, state, index)
    return []


def _apply_step_relation(step: ActionStep, state: _Execution, index: int) -> None:
    """Materialize an explicit near/orientation relation carried by a step."""
    if step.relation is None:
        return
    if step.relation.kind not in ORIENTATION_KINDS and step.relation.kind is not RelationKind.NEAR:
        return
    parent = state.representative(step.relation.parent)
    child = state.representative(step.relation.child)
    if parent is None or child is None or parent == child:
        return
    if parent not in state.graph.nodes or child not in state.graph.nodes:
        return
    relation = Relation(
        step.relation.kind, parent, child, RelationSource.PLANNER, step_index=index
    )
    if relation.key() not in state.graph.edge_keys():
        state.graph.edges.append(relation)


def execute_symbolically(initial: SceneGraph, plan: Plan) -> ExecutionOutcome:
    """Replay a plan against the executor rules.

    The first physical failure freezes further effects but logical
    validation continues over the remaining steps; the final graph is
    compared to the plan goal only when no other error was found.
    """
    state = _Execution(initial)
    logical: list[dict[str, Any]] = []
    physical: list[dict[str, Any]] = []
    events: list[FeedbackEvent] = []
    failed_step: int | None = None

    for index, step in enumerate(plan.steps):
        step_logical = _logical_errors_for_step(step, state, index)
        if step_logical:
            logical.extend(step_logical)
            if failed_step is None:
                failed_step = index
            continue
        if failed_step is not None and physical:
            continue  # collect logic only once physically failed
        step_physical = _check_and_apply(step, state, index)
        if step_physical:
            physical.extend(step_physical)
            failed_step = index
            for error in step_physical:
                events.append(
                    FeedbackEvent(
                        kind=EventKind.PRECONDITION_FAILURE,
                        origin=EventOrigin.EXECUTOR,
                        payload=dict(error),
                    )
                )

    if failed_step is None and not logical and not physical and plan.goal is not None:
        goal_states = {i: dict(n.states) for i, n in plan.goal.nodes.items()}
        final_states = {i: dict(n.states) for i, n in state.graph.nodes.items()}
        if state.graph.edge_keys() != plan.goal.edge_keys() or goal_states != final_states:
            logical.append(
                {
                    "code": "GoalMismatch",
                    "step_index": len(plan.steps),
                    "detail": "replaying the steps does not reproduce the goal graph",
                    "subject": "",
                }
            )
            failed_step = len(plan.steps)

    ok = not logical and not physical
    return ExecutionOutcome(
        ok=ok,
        failed_step=None if ok else failed_step,
        events=events,
        logical_errors=logical,
        physical_errors=physical,
        final_graph=state.graph,
    )


# --- plan assembly -----------------------------------------------------------------


def _optimistic_goal(
    initial: SceneGraph, steps: Sequence[ActionStep], groups: Sequence[GroupDag]
) -> SceneGraph:
    """Apply step effects without precondition checks to derive the goal."""
    seeded = SceneGraph(
        nodes=[n.copy() for n in initial.nodes.values()],
        edges=list(initial.edges),
        groups=list(groups),
    )
    category_of = {m: grp.category for grp in groups for m in grp.member_ids}
    for node in seeded.nodes.values():
        if node.id in category_of:
            node.category = category_of[node.id]
    state = _Execution(seeded)
    for index, step in enumerate(steps):
        if _logical_errors_for_step(step, state, index):
            continue
        if step.primitive is Primitive.GROUP:
            members = state.memberships.setdefault(step.args[0], [])
            if step.args[1] not in members:
                members.append(step.args[1])
                members.sort()
            continue
        if step.primitive in (Primitive.OPEN, Primitive.CLOSE):
            node = state.graph.nodes[step.args[0]]
            if node.is_container:
                node.states["open"] = step.primitive is Primitive.OPEN
            continue
        if step.primitive is Primitive.SLICE:
            state.graph.nodes[step.args[0]].states["sliced"] = True
            continue
        dest_arg, item_arg = step.args
        items = state.resolve_items(item_arg)
        if step.primitive is Primitive.PUT_NEAR:
            anchor = state.representative(dest_arg)
            if anchor:
                for item in items:
                    if item == anchor:
                        continue
                    relation = Relation(
                        RelationKind.NEAR, anchor, item, RelationSource.PLANNER, step_index=index
                    )
                    if relation.key() not in state.graph.edge_keys():
                        state.graph.edges.append(relation)
        else:
            kind = RelationKind.ON if step.primitive is Primitive.PUT_ON else RelationKind.IN
            for item in items:
                if state.graph.nodes[item].is_base or item == dest_arg:
                    continue
                _remove_support_edge(state.graph, item)
                state.graph.edges.append(
                    Relation(kind, dest_arg, item, RelationSource.PLANNER, step_index=index)
                )
        _apply_step_relation(step, state, index)

    goal = state.graph
    # refresh intra-group edges from the realized goal
    goal.groups = [
        GroupDag(
            category=grp.category,
            member_ids=list(grp.member_ids),
            intra_edges=[
                e
                for e in goal.edges
                if e.parent in grp.member_ids and e.child in grp.member_ids
            ],
        )
        for grp in groups
    ]
    return goal


def _group_membership_steps(groups: Sequence[GroupDag]) -> list[ActionStep]:
    steps = []
    for group in groups:
        for member in group.member_ids:
            steps.append(
                ActionStep(Primitive.GROUP, (GROUP_PREFIX + group.category, member))
            )
    return steps


def _category_edges_from_steps(steps: Sequence[ActionStep]) -> list[tuple[str, str, str]]:
    edges = []
    for step in steps:
        if step.relation is None:
            continue
        parent, child = step.relation.parent, step.relation.child
        if is_placeholder(parent) and is_placeholder(child):
            edges.append(
                (step.relation.kind.value, placeholder_category(parent), placeholder_category(child))
            )
    return edges


def plan_task(
    initial: SceneGraph,
    instruction: str,
    backend: PlannerBackend,
    prefs: Sequence[Any] = (),
    feedback: Sequence[FeedbackEvent] = (),
    recorder: CallRecorder | None = None,
) -> Plan:
    """Full top-down pipeline: categorize, inter-group, intra-group."""
    objects = [initial.nodes[i] for i in initial.movable_ids()]
    groups, category_graph, categorize_call = categorize(
        objects, backend, initial, instruction, prefs, feedback, recorder
    )
    inter_steps, inter_call = plan_intergroup(
        groups, backend, initial, instruction, prefs, feedback, recorder
    )
    grouped_scene = SceneGraph(
        nodes=[n.copy() for n in initial.nodes.values()],
        edges=list(initial.edges),
        groups=groups,
    )
    steps = _group_membership_steps(groups)
    provenance = {i: categorize_call for i in range(len(steps))}
    offset = len(steps)
    steps.extend(inter_steps)
    for i in range(len(inter_steps)):
        provenance[offset + i] = inter_call
    for group in groups:
        intra_steps, intra_call = plan_intragroup(
            group, backend, grouped_scene, instruction, prefs, feedback, recorder
        )
        offset = len(steps)
        steps.extend(intra_steps)
        for i in range(len(intra_steps)):
            provenance[offset + i] = intra_call
    category_graph.edges = _category_edges_from_steps(steps)
    goal = _optimistic_goal(initial, steps, groups)
    return Plan(steps=steps, goal=goal, provenance=provenance)


# --- replanning -------------------------------------------------------------------


def build_failure_context(
    goal: SceneGraph,
    outcome: ExecutionOutcome | None,
    events: Sequence[FeedbackEvent] = (),
) -> dict[str, Any]:
    """Error-source context: failing relations with their source tags plus
    every relation incident to the affected nodes."""
    affected: set[str] = set()
    failing_relations: list[dict[str, Any]] = []
    error_codes: set[str] = set()

    def note_relation(rel: Mapping[str, Any]) -> None:
        if rel not in failing_relations:
            failing_relations.append(dict(rel))

    if outcome is not None:
        for error in outcome.logical_errors + outcome.physical_errors:
            error_codes.add(error["code"])
            affected.update(error.get("objects", []))
            subject = error.get("subject")
            if subject:
                affected.add(subject)
            for rel in error.get("relations", []):
                note_relation(rel)
    for event in events:
        if event.kind in PREFERENCE_KINDS:
            continue
        error_codes.add(event.kind.value)
        payload = event.payload
        affected.update(payload.get("objects", []))
        for rel in payload.get("relations", []):
            note_relation(rel)
        if "violated" in payload:
            note_relation(payload["violated"])

    known = [i for i in sorted(affected) if i in goal.nodes]
    neighbor_relations = [e.to_dict() for e in goal.relations_incident(known)]
    return {
        "error_codes": sorted(error_codes),
        "affected_objects": sorted(affected),
        "failing_relations": failing_relations,
        "neighbor_relations": neighbor_relations,
    }


def replan_with_feedback(
    initial: SceneGraph,
    failed_plan: Plan,
    outcome: ExecutionOutcome | None,
    prefs: Sequence[Any],
    backend: PlannerBackend,
    events: Sequence[FeedbackEvent] = (),
    instruction: str = "",
    last_failure_signature: str | None = None,
    recorder: CallRecorder | None = None,
) -> Plan:
    """Regenerate a complete plan under failure and preference context."""
    preference_pending = any(e.kind in PREFERENCE_KINDS for e in events)
    physical_pending = any(e.kind not in PREFERENCE_KINDS for e in events)
    if outcome is not None and outcome.ok and not preference_pending and not physical_pending:
        raise PlanningError("replan needs a failing outcome or pending feedback")

    signature = failure_signature(outcome, events)
    if last_failure_signature is not None and signature == last_failure_signature:
        raise NoProgress("two consecutive replans failed on identical steps")

    failure = build_failure_context(failed_plan.goal, outcome, events)
    bundle = assemble(
        Stage.REPLAN,
        initial if not failed_plan.goal.groups else SceneGraph(
            nodes=[n.copy() for n in initial.nodes.values()],
            edges=list(initial.edges),
            groups=list(failed_plan.goal.groups),
        ),
        instruction,
        prefs,
        events,
        failure=failure,
    )
    response, call_id = _complete_with_retry(backend, bundle, recorder)
    steps = _steps_from_payload(response.parsed)
    groups = failed_plan.goal.groups or []
    steps = _group_membership_steps(groups) + steps
    goal = _optimistic_goal(initial, steps, groups)
    provenance = {i: call_id for i in range(len(steps))}
    return Plan(steps=steps, goal=goal, provenance=provenance)


def failure_signature(
    outcome: ExecutionOutcome | None, events: Sequence[FeedbackEvent] = ()
) -> str:
    parts = {
        "outcome": outcome.failure_signature() if outcome is not None else "",
        "events": sorted(
            canonical_dumps(e.to_dict())
            for e in events
            if e.kind not in PREFERENCE_KINDS
        ),
    }
    return canonical_dumps(parts)
