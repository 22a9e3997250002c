"""Prompt assembly and the pluggable planner/summarizer backends.

Two interchangeable backends sit behind one interface: an HTTP client for
any chat-completions-compatible endpoint, and a deterministic rule-table
mock that makes the whole pipeline testable offline.  The mock is a pure
function of the prompt bundle text; its rule tables ship as a JSON fixture
(data/mock_rules.json).

Prompt text is original and documented in docs/prompts.md.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Any, Mapping, Protocol, Sequence

import httpx

from .actions import GROUP_PREFIX, Primitive, arity
from .errors import (
    BackendError,
    BackendTimeout,
    HttpError,
    ParseError,
    PromptBudgetExceeded,
)
from .scene import RelationKind, SceneGraph, canonical_dumps

DEFAULT_PROMPT_TOKEN_CEILING = 16000
DEFAULT_TIMEOUT_S = 30.0

ENV_ENDPOINT = "TIDYLOOP_LLM_URL"
ENV_API_KEY = "TIDYLOOP_LLM_API_KEY"
ENV_MODEL = "TIDYLOOP_LLM_MODEL"


class Stage(str, Enum):
    CATEGORIZE = "categorize"
    INTERGROUP = "intergroup"
    INTRAGROUP = "intragroup"
    REPLAN = "replan"
    SUMMARIZE_ADJUSTMENT = "summarize_adjustment"
    PROFILE = "profile"


@dataclass(frozen=True)
class PromptBundle:
    system: str
    context: str
    stage: Stage


@dataclass
class BackendResponse:
    raw: str
    parsed: Any
    usage: dict[str, int] = field(default_factory=dict)


def estimate_tokens(text: str) -> int:
    """Rough budget estimate used consistently across the engine."""
    return math.ceil(len(text) / 4)


_STEP_GRAMMAR = (
    'Respond with JSON: {"steps": [{"primitive": P, "args": [...], "relation": R?}]}. '
    "P is one of group|put_on|put_in|put_near|open|close|slice. Binary primitives "
    "take [destination, item]; unary take [object]. R, when given, is "
    '{"kind": on|in|near|left_of|right_of|front_of|behind, "parent": id, "child": id}.'
)

SYSTEM_PROMPTS: dict[Stage, str] = {
    Stage.CATEGORIZE: (
        "You organize household objects for a rearrangement robot. Assign every "
        "movable object to exactly one category. Respond with JSON: "
        '{"groups": [{"category": name, "members": [object ids]}]}.'
    ),
    Stage.INTERGROUP: (
        "You place object categories onto support surfaces, honoring the stated "
        "human preferences. Use group placeholders (group:<category>) plus base "
        "objects only. " + _STEP_GRAMMAR
    ),
    Stage.INTRAGROUP: (
        "You arrange the objects inside one category group, honoring the stated "
        "human preferences. Interact with containers only while they are open. "
        + _STEP_GRAMMAR
    ),
    Stage.REPLAN: (
        "A previous plan failed. Using the failure context (failing relations, "
        "their sources, and their neighbor relations) and the human preferences, "
        "produce a complete new plan, not a patch. " + _STEP_GRAMMAR
    ),
    Stage.SUMMARIZE_ADJUSTMENT: (
        "A human adjusted the scene. Summarize the adjustment diff into one "
        "preference sentence. Respond with JSON: "
        '{"preference": sentence, "scope_tags": [tags]}.'
    ),
    Stage.PROFILE: (
        "Compress the listed low-level preferences into fewer general ones. Each "
        "profile must cite at least two source ids. Respond with JSON: "
        '{"profiles": [{"text": sentence, "scope_tags": [tags], "derived_from": [ids]}]}.'
    ),
}


def _preference_lines(prefs: Sequence[Any]) -> list[str]:
    seen: set[str] = set()
    profiles: list[Any] = []
    raws: list[Any] = []
    for record in prefs:
        if record.id in seen:
            continue
        seen.add(record.id)
        source = getattr(record.source, "value", record.source)
        if source == "profile":
            profiles.append(record)
        else:
            raws.append(record)
    profiles.sort(key=lambda r: (r.created_at, r.id))
    raws.sort(key=lambda r: (-r.created_at, r.id))
    lines = []
    for record in profiles + raws:
        source = getattr(record.source, "value", record.source)
        lines.append(f"- [{source}] {record.text}")
    return lines


def assemble(
    stage: Stage,
    scene: SceneGraph | None,
    instruction: str,
    prefs: Sequence[Any] = (),
    feedback: Sequence[Any] = (),
    failure: Mapping[str, Any] | None = None,
    target_group: str | None = None,
    changes: Sequence[Mapping[str, Any]] | None = None,
    records: Sequence[Mapping[str, Any]] | None = None,
    prompt_token_ceiling: int = DEFAULT_PROMPT_TOKEN_CEILING,
) -> PromptBundle:
    """Deterministic prompt text for a stage.

    Preferences appear exactly once each, profiles first, then raw records
    newest-first.  The feedback section is present whenever events are
    pending.
    """
    stage = Stage(stage)
    parts: list[str] = []
    parts.append("## SCENE")
    parts.append(scene.canonical_json() if scene is not None else "(none)")
    parts.append("## INSTRUCTION")
    parts.append(instruction or "(none)")

    pref_lines = _preference_lines(prefs)
    pref_section = "\n".join(pref_lines) if pref_lines else "(none)"
    parts.append("## PREFERENCES")
    parts.append(pref_section)

    event_dicts = [e.to_dict() if hasattr(e, "to_dict") else dict(e) for e in feedback]
    parts.append("## FEEDBACK")
    parts.append(canonical_dumps(event_dicts) if event_dicts else "(none)")

    if stage is Stage.REPLAN:
        parts.append("## FAILURE")
        parts.append(canonical_dumps(failure or {}))
    if stage is Stage.INTRAGROUP:
        parts.append("## TARGET GROUP")
        parts.append(target_group or "")
    if stage is Stage.SUMMARIZE_ADJUSTMENT:
        parts.append("## DIFF")
        parts.append(canonical_dumps(list(changes or [])))
    if stage is Stage.PROFILE:
        parts.append("## RECORDS")
        parts.append(canonical_dumps(list(records or [])))

    context = "\n".join(parts)
    pref_tokens = estimate_tokens(pref_section)
    if pref_tokens > prompt_token_ceiling:
        raise PromptBudgetExceeded(
            f"preferences alone estimate {pref_tokens} tokens over the "
            f"{prompt_token_ceiling} ceiling: the store's profiling "
            "precondition has been violated"
        )
    total_tokens = estimate_tokens(context)
    if total_tokens > prompt_token_ceiling:
        raise PromptBudgetExceeded(
            f"assembled context estimates {total_tokens} tokens over the "
            f"{prompt_token_ceiling} ceiling"
        )
    return PromptBundle(system=SYSTEM_PROMPTS[stage], context=context, stage=stage)


# --- output grammar ------------------------------------------------------------


def _expect(condition: bool, message: str, location: str) -> None:
    if not condition:
        raise ParseError(message, location)


def _normalize_step(step: Any, location: str) -> dict[str, Any]:
    _expect(isinstance(step, dict), "step must be an object", location)
    primitive = step.get("primitive")
    try:
        prim = Primitive(primitive)
    except ValueError:
        raise ParseError(f"unknown primitive {primitive!r}", f"{location}.primitive")
    args = step.get("args")
    _expect(isinstance(args, list), "args must be a list", f"{location}.args")
    _expect(
        len(args) == arity(prim),
        f"{prim.value} takes {arity(prim)} argument(s), got {len(args)}",
        f"{location}.args",
    )
    for pos, arg in enumerate(args):
        _expect(isinstance(arg, str) and arg, "argument must be a non-empty string", f"{location}.args[{pos}]")
    out: dict[str, Any] = {"primitive": prim.value, "args": list(args)}
    relation = step.get("relation")
    if relation is not None:
        _expect(isinstance(relation, dict), "relation must be an object", f"{location}.relation")
        try:
            kind = RelationKind(relation.get("kind"))
        except ValueError:
            raise ParseError(
                f"unknown relation kind {relation.get('kind')!r}", f"{location}.relation.kind"
            )
        parent, child = relation.get("parent"), relation.get("child")
        _expect(isinstance(parent, str) and bool(parent), "relation.parent required", f"{location}.relation.parent")
        _expect(isinstance(child, str) and bool(child), "relation.child required", f"{location}.relation.child")
        out["relation"] = {"kind": kind.value, "parent": parent, "child": child}
    return out


def parse_stage_output(raw: str, stage: Stage) -> dict[str, Any]:
    """Grammar-check a backend response; failures carry a precise location."""
    stage = Stage(stage)
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        location = "end of input" if exc.pos >= len(raw.rstrip()) else f"char {exc.pos}"
        raise ParseError(f"invalid JSON: {exc.msg}", location) from None
    _expect(isinstance(data, dict), "payload must be a JSON object", "$")

    if stage is Stage.CATEGORIZE:
        groups = data.get("groups")
        _expect(isinstance(groups, list) and groups, "groups must be a non-empty list", "$.groups")
        normalized = []
        for pos, group in enumerate(groups):
            loc = f"$.groups[{pos}]"
            _expect(isinstance(group, dict), "group must be an object", loc)
            category = group.get("category")
            members = group.get("members")
            _expect(isinstance(category, str) and bool(category), "category required", f"{loc}.category")
            _expect(isinstance(members, list) and members, "members must be non-empty", f"{loc}.members")
            for m_pos, member in enumerate(members):
                _expect(isinstance(member, str) and bool(member), "member id required", f"{loc}.members[{m_pos}]")
            normalized.append({"category": category, "members": list(members)})
        return {"groups": normalized}

    if stage in (Stage.INTERGROUP, Stage.INTRAGROUP, Stage.REPLAN):
        steps = data.get("steps")
        _expect(isinstance(steps, list), "steps must be a list", "$.steps")
        return {"steps": [_normalize_step(s, f"$.steps[{i}]") for i, s in enumerate(steps)]}

    if stage is Stage.SUMMARIZE_ADJUSTMENT:
        preference = data.get("preference")
        _expect(isinstance(preference, str) and bool(preference.strip()), "preference sentence required", "$.preference")
        tags = data.get("scope_tags", [])
        _expect(isinstance(tags, list), "scope_tags must be a list", "$.scope_tags")
        return {"preference": preference, "scope_tags": [str(t) for t in tags]}

    if stage is Stage.PROFILE:
        profiles = data.get("profiles")
        _expect(isinstance(profiles, list), "profiles must be a list", "$.profiles")
        normalized = []
        for pos, profile in enumerate(profiles):
            loc = f"$.profiles[{pos}]"
            _expect(isinstance(profile, dict), "profile must be an object", loc)
            text = profile.get("text")
            _expect(isinstance(text, str) and bool(text.strip()), "profile text required", f"{loc}.text")
            derived = profile.get("derived_from")
            _expect(
                isinstance(derived, list) and len(derived) >= 2,
                "profiles must derive from at least two records",
                f"{loc}.derived_from",
            )
            normalized.append(
                {
                    "text": text,
                    "scope_tags": [str(t) for t in profile.get("scope_tags", [])],
                    "derived_from": [str(d) for d in derived],
                }
            )
        return {"profiles": normalized}

    raise ParseError(f"unsupported stage {stage}", "$")


def payload_to_text(payload: Mapping[str, Any]) -> str:
    return canonical_dumps(payload)


class PlannerBackend(Protocol):
    def complete(self, bundle: PromptBundle) -> BackendResponse: ...


# --- deterministic mock ----------------------------------------------------------


def load_mock_rules() -> dict[str, Any]:
    with resources.files("tidyloop.data").joinpath("mock_rules.json").open("r") as fh:
        return json.load(fh)


def _split_sections(context: str) -> dict[str, str]:
    sections: dict[str, str] = {}
    current: str | None = None
    lines: list[str] = []
    for line in context.splitlines():
        if line.startswith("## "):
            if current is not None:
                sections[current] = "\n".join(lines).strip()
            current = line[3:].strip()
            lines = []
        else:
            lines.append(line)
    if current is not None:
        sections[current] = "\n".join(lines).strip()
    return sections


def _section_json(sections: Mapping[str, str], name: str, default: Any) -> Any:
    text = sections.get(name, "")
    if not text or text == "(none)":
        return default
    return json.loads(text)


class MockBackend:
    """Rule-table planner: a pure function of the prompt bundle text."""

    def __init__(self, rules: Mapping[str, Any] | None = None):
        self.rules = dict(rules) if rules is not None else load_mock_rules()
        self.lexicon: dict[str, str] = self.rules["category_lexicon"]
        self.stackable: set[str] = set(self.rules["stackable_categories"])
        self.naive_containers: set[str] = set(self.rules["naive_container_labels"])

    # -- public interface ---------------------------------------------------

    def complete(self, bundle: PromptBundle) -> BackendResponse:
        sections = _split_sections(bundle.context)
        scene_doc = _section_json(sections, "SCENE", None)
        prefs_text = sections.get("PREFERENCES", "")
        if prefs_text == "(none)":
            prefs_text = ""
        prefs_text = prefs_text.lower()
        feedback = _section_json(sections, "FEEDBACK", [])
        stage = bundle.stage

        if stage is Stage.CATEGORIZE:
            payload = self._categorize(scene_doc)
        elif stage is Stage.INTERGROUP:
            payload = self._intergroup(scene_doc, prefs_text)
        elif stage is Stage.INTRAGROUP:
            payload = self._intragroup(scene_doc, sections.get("TARGET GROUP", ""), prefs_text)
        elif stage is Stage.REPLAN:
            failure = _section_json(sections, "FAILURE", {})
            payload = self._replan(scene_doc, prefs_text, feedback, failure)
        elif stage is Stage.SUMMARIZE_ADJUSTMENT:
            changes = _section_json(sections, "DIFF", [])
            payload = self._summarize(scene_doc, changes)
        elif stage is Stage.PROFILE:
            records = _section_json(sections, "RECORDS", [])
            payload = self._profile(records)
        else:  # pragma: no cover - enum is exhaustive
            raise BackendError(f"mock cannot serve stage {stage}")

        raw = payload_to_text(payload)
        return BackendResponse(
            raw=raw,
            parsed=parse_stage_output(raw, stage),
            usage={
                "prompt_tokens": estimate_tokens(bundle.system + bundle.context),
                "completion_tokens": estimate_tokens(raw),
            },
        )

    def preference_tag(self, text: str) -> str | None:
        """Map free preference text onto a benchmark predicate tag."""
        lowered = text.lower()
        for rule in self.rules["preference_rules"]:
            if any(token in lowered for token in rule["contains"]):
                return rule["tag"]
        return None

    def active_tags(self, prefs_text: str) -> set[str]:
        tags = set()
        for rule in self.rules["preference_rules"]:
            if any(token in prefs_text for token in rule["contains"]):
                tags.add(rule["tag"])
        return tags

    # -- stage rules -----------------------------------------------------------

    def category_of_label(self, label: str) -> str:
        return self.lexicon.get(label.lower(), label.lower())

    def _categorize(self, doc: Mapping[str, Any]) -> dict[str, Any]:
        groups: dict[str, list[str]] = {}
        for node in doc["nodes"]:
            if node.get("is_base"):
                continue
            category = self.category_of_label(node["label"])
            groups.setdefault(category, []).append(node["id"])
        return {
            "groups": [
                {"category": category, "members": sorted(members)}
                for category, members in sorted(groups.items())
            ]
        }

    def _groups_from_doc(self, doc: Mapping[str, Any]) -> list[dict[str, Any]]:
        if doc.get("groups"):
            return [
                {"category": g["category"], "members": sorted(g["members"])}
                for g in sorted(doc["groups"], key=lambda g: g["category"])
            ]
        return self._categorize(doc)["groups"]

    def _nodes_by_id(self, doc: Mapping[str, Any]) -> dict[str, dict[str, Any]]:
        return {n["id"]: n for n in doc["nodes"]}

    def _pick_surface(
        self, doc: Mapping[str, Any], category: str, tags: set[str]
    ) -> str | None:
        bases = sorted(
            (n for n in doc["nodes"] if n.get("is_base")),
            key=lambda n: (
                -4.0 * n["half_extents"][0] * n["half_extents"][1],
                n["id"],
            ),
        )
        if not bases:
            return None
        beds = [b for b in bases if b["label"].lower() == "bed"]
        others = [b for b in bases if b["label"].lower() != "bed"]
        if "keep_bed_clear" in tags and category != "bedding" and others:
            bases = others
        elif category == "bedding" and beds:
            return beds[0]["id"]
        tables = [b for b in bases if b["label"].lower() == "table"]
        if tables:
            return sorted(tables, key=lambda n: n["id"])[0]["id"]
        return bases[0]["id"]

    def _category_mentioned(self, text: str, categories: list[str]) -> str | None:
        tokens = [t.strip(".,;:!?\"'()") for t in text.split()]
        for token in tokens:
            singular = token[:-1] if token.endswith("s") else token
            for candidate in (token, singular):
                if candidate in categories:
                    return candidate
                mapped = self.lexicon.get(candidate)
                if mapped in categories:
                    return mapped
        return None

    def _put_on_step(self, dest: str, item: str) -> dict[str, Any]:
        return {"primitive": "put_on", "args": [dest, item]}

    @staticmethod
    def _fits_inside(item: Mapping[str, Any], container: Mapping[str, Any], closed: bool) -> bool:
        """Coarse geometric sanity: never plan to stuff what cannot fit."""
        ihx, ihy, ihz = item["half_extents"]
        chx, chy, chz = container["half_extents"]
        horizontal = (ihx <= 0.95 * chx and ihy <= 0.95 * chy) or (
            ihy <= 0.95 * chx and ihx <= 0.95 * chy
        )
        return horizontal and (ihz <= chz if closed else True)

    # contents rest on the container floor in one layer, so only plan to fill
    # this fraction of its footprint before spilling to the surface
    CONTAINER_PACKING_FRACTION = 0.45

    @staticmethod
    def _footprint_area(node: Mapping[str, Any]) -> float:
        hx, hy, _ = node["half_extents"]
        return 4.0 * hx * hy

    def _packable(
        self,
        item: Mapping[str, Any],
        container: Mapping[str, Any],
        closed: bool,
        used_area: float,
    ) -> bool:
        if not self._fits_inside(item, container, closed):
            return False
        capacity = self.CONTAINER_PACKING_FRACTION * self._footprint_area(container)
        return used_area + self._footprint_area(item) <= capacity

    def _intergroup(self, doc: Mapping[str, Any], prefs_text: str) -> dict[str, Any]:
        tags = self.active_tags(prefs_text)
        groups = self._groups_from_doc(doc)
        categories = [g["category"] for g in groups]
        steps: list[dict[str, Any]] = []

        nodes = self._nodes_by_id(doc)
        if "same_container" in tags:
            containers = sorted(
                (
                    n
                    for n in doc["nodes"]
                    if n.get("is_container")
                ),
                key=lambda n: (
                    -8.0
                    * n["half_extents"][0]
                    * n["half_extents"][1]
                    * n["half_extents"][2],
                    n["id"],
                ),
            )
            if containers:
                container = containers[0]
                container_id = container["id"]
                closed = not container.get("states", {}).get("open", False)
                bracket = closed and container["label"].lower() not in self.naive_containers
                surface = self._pick_surface(doc, "", tags)
                if not container.get("is_base") and surface:
                    steps.append(self._put_on_step(surface, container_id))
                if bracket:
                    steps.append({"primitive": "open", "args": [container_id]})
                leftovers: list[str] = []
                used_area = 0.0
                for group in groups:
                    members = [m for m in group["members"] if m != container_id]
                    fitting = []
                    for member in members:
                        if self._packable(nodes[member], container, closed, used_area):
                            fitting.append(member)
                            used_area += self._footprint_area(nodes[member])
                    if container_id not in group["members"] and fitting == members:
                        steps.append(
                            {"primitive": "put_in", "args": [container_id, GROUP_PREFIX + group["category"]]}
                        )
                    else:
                        for member in fitting:
                            steps.append({"primitive": "put_in", "args": [container_id, member]})
                        leftovers.extend(m for m in members if m not in fitting)
                if bracket:
                    steps.append({"primitive": "close", "args": [container_id]})
                if surface:
                    for member in sorted(leftovers):
                        steps.append(self._put_on_step(surface, member))
                return {"steps": steps}

        for group in groups:
            surface = self._pick_surface(doc, group["category"], tags)
            if surface:
                steps.append(self._put_on_step(surface, GROUP_PREFIX + group["category"]))

        if "mix" in tags and len(groups) >= 2:
            # one explicit instance of one category stacked onto another
            bottom = groups[0]["members"][0]
            top = groups[1]["members"][0]
            steps.append(self._put_on_step(bottom, top))

        for rule in self.rules["orientation_rules"]:
            if rule["pattern"] in prefs_text:
                target = self._category_mentioned(prefs_text, categories)
                if target and len(categories) >= 2:
                    other = next(c for c in categories if c != target)
                    steps.append(
                        {
                            "primitive": "put_near",
                            "args": [GROUP_PREFIX + other, GROUP_PREFIX + target],
                            "relation": {
                                "kind": rule["kind"],
                                "parent": GROUP_PREFIX + other,
                                "child": GROUP_PREFIX + target,
                            },
                        }
                    )
                break
        return {"steps": steps}

    def _intragroup(
        self,
        doc: Mapping[str, Any],
        category: str,
        prefs_text: str,
        flatten_categories: set[str] | None = None,
    ) -> dict[str, Any]:
        tags = self.active_tags(prefs_text)
        groups = self._groups_from_doc(doc)
        group = next((g for g in groups if g["category"] == category), None)
        if group is None or len(group["members"]) < 2:
            return {"steps": []}
        if "same_container" in tags:
            # the global container plan already placed every member
            return {"steps": []}
        nodes = self._nodes_by_id(doc)
        members = sorted(group["members"])
        steps: list[dict[str, Any]] = []

        remaining = list(members)
        containers = [m for m in members if nodes[m].get("is_container")]
        if containers:
            container = containers[0]
            closed = not nodes[container].get("states", {}).get("open", False)
            items = []
            used_area = 0.0
            for m in members:
                if m == container:
                    continue
                if self._packable(nodes[m], nodes[container], closed, used_area):
                    items.append(m)
                    used_area += self._footprint_area(nodes[m])
            if items:
                bracket = closed and nodes[container]["label"].lower() not in self.naive_containers
                if bracket:
                    steps.append({"primitive": "open", "args": [container]})
                for item in items:
                    steps.append({"primitive": "put_in", "args": [container, item]})
                if bracket:
                    steps.append({"primitive": "close", "args": [container]})
                remaining = [m for m in members if m not in items]
                if len(remaining) < 2:
                    return {"steps": steps}

        flatten = flatten_categories or set()
        no_stack = "no_stacking" in tags or category in flatten
        if not no_stack and category in self.stackable:
            for bottom, top in zip(remaining, remaining[1:]):
                steps.append(self._put_on_step(bottom, top))
        else:
            for anchor, item in zip(remaining, remaining[1:]):
                steps.append({"primitive": "put_near", "args": [anchor, item]})
        return {"steps": steps}

    def _replan(
        self,
        doc: Mapping[str, Any],
        prefs_text: str,
        feedback: list[dict[str, Any]],
        failure: Mapping[str, Any],
    ) -> dict[str, Any]:
        nodes = self._nodes_by_id(doc)
        error_codes = set(failure.get("error_codes", []))
        flatten: set[str] = set()
        for event in feedback:
            if event.get("kind") in ("collision", "collapse"):
                for obj in event.get("payload", {}).get("objects", []):
                    node = nodes.get(obj)
                    if node and not node.get("is_base"):
                        flatten.add(self.category_of_label(node["label"]))

        steps = list(self._intergroup(doc, prefs_text)["steps"])
        for group in self._groups_from_doc(doc):
            steps.extend(
                self._intragroup(doc, group["category"], prefs_text, flatten_categories=flatten)["steps"]
            )

        if "ContainerClosed" in error_codes:
            steps = self._bracket_containers(steps, nodes)
        return {"steps": steps}

    def _bracket_containers(
        self, steps: list[dict[str, Any]], nodes: Mapping[str, dict[str, Any]]
    ) -> list[dict[str, Any]]:
        """Repair rule: guarantee open-before/close-after around put_in runs."""
        targets: list[str] = []
        for step in steps:
            if step["primitive"] == "put_in" and step["args"][0] in nodes:
                container = step["args"][0]
                if container not in targets:
                    targets.append(container)
        out = list(steps)
        for container in targets:
            closed = not nodes[container].get("states", {}).get("open", False)
            if not closed:
                continue
            first = next(
                i for i, s in enumerate(out)
                if s["primitive"] == "put_in" and s["args"][0] == container
            )
            has_open = any(
                s["primitive"] == "open" and s["args"][0] == container for s in out[:first]
            )
            if not has_open:
                out.insert(first, {"primitive": "open", "args": [container]})
            last = max(
                i for i, s in enumerate(out)
                if s["primitive"] == "put_in" and s["args"][0] == container
            )
            has_close = any(
                s["primitive"] == "close" and s["args"][0] == container for s in out[last + 1:]
            )
            if not has_close:
                out.insert(last + 1, {"primitive": "close", "args": [container]})
        return out

    def _summarize(
        self, doc: Mapping[str, Any] | None, changes: list[dict[str, Any]]
    ) -> dict[str, Any]:
        templates = self.rules["summary_templates"]
        phrases = self.rules["kind_phrases"]
        nodes = self._nodes_by_id(doc) if doc else {}

        def label(node_id: str) -> str:
            return nodes.get(node_id, {}).get("label", node_id)

        def category(node_id: str) -> str:
            node = nodes.get(node_id)
            if not node:
                return node_id
            return self.category_of_label(node["label"])

        added = [c for c in changes if c.get("kind") == "relation_added"]
        removed = [c for c in changes if c.get("kind") == "relation_removed"]
        states = [c for c in changes if c.get("kind") == "state_changed"]

        moves = []
        for add in added:
            for rem in removed:
                if (
                    add["relation"]["kind"] == rem["relation"]["kind"]
                    and add["relation"]["child"] == rem["relation"]["child"]
                ):
                    moves.append((rem, add))
        moves.sort(key=lambda pair: pair[1]["relation"]["child"])

        involved: list[str] = []
        if moves:
            rem, add = moves[0]
            child = add["relation"]["child"]
            new_parent = add["relation"]["parent"]
            old_parent = rem["relation"]["parent"]
            new_node = nodes.get(new_parent, {})
            old_node = nodes.get(old_parent, {})
            # phrase the summary so the planner's own preference rules can
            # recognize and re-apply what was learned
            if new_node.get("is_base") and not old_node.get("is_base"):
                key = "relation_moved_flat"
            elif (
                not new_node.get("is_base")
                and new_parent in nodes
                and child in nodes
                and category(new_parent) != category(child)
            ):
                key = "relation_moved_mix"
            else:
                key = "relation_moved"
            text = templates[key].format(
                child=label(child),
                new_parent=label(new_parent),
                old_parent=label(old_parent),
            )
            involved = [child, new_parent, old_parent]
        elif added:
            first = sorted(added, key=lambda c: c["relation"]["child"])[0]
            rel = first["relation"]
            text = templates["relation_added"].format(
                child=label(rel["child"]),
                phrase=phrases[rel["kind"]],
                parent=label(rel["parent"]),
            )
            involved = [rel["child"], rel["parent"]]
        elif removed:
            first = sorted(removed, key=lambda c: c["relation"]["child"])[0]
            rel = first["relation"]
            text = templates["relation_removed"].format(
                child=label(rel["child"]),
                phrase=phrases[rel["kind"]],
                parent=label(rel["parent"]),
            )
            involved = [rel["child"], rel["parent"]]
        elif states:
            first = sorted(states, key=lambda c: c["object_id"])[0]
            if first["state"] == "open":
                value = "open" if first.get("after") else "closed"
            else:
                value = first["state"] if first.get("after") else f"not {first['state']}"
            text = templates["state_changed"].format(object=label(first["object_id"]), value=value)
            involved = [first["object_id"]]
        else:
            text = templates["generic"]

        tags = sorted({category(i) for i in involved if i in nodes})
        return {"preference": text, "scope_tags": tags}

    def _profile(self, records: list[dict[str, Any]]) -> dict[str, Any]:
        ordered = sorted(
            records,
            key=lambda r: ((r.get("scope_tags") or ["zz_general"])[0], r["id"]),
        )
        chunks: list[list[dict[str, Any]]] = []
        for start in range(0, len(ordered), 3):
            chunks.append(ordered[start:start + 3])
        if len(chunks) >= 2 and len(chunks[-1]) == 1:
            chunks[-2].extend(chunks.pop())
        template = self.rules["profile_template"]
        profiles = []
        for chunk in chunks:
            if len(chunk) < 2:
                continue  # cannot compress a lone record into a profile
            gist = min((r["text"] for r in chunk), key=len)
            tags = sorted({t for r in chunk for t in r.get("scope_tags", [])})
            profiles.append(
                {
                    "text": template.format(gist=gist, count=len(chunk)),
                    "scope_tags": tags,
                    "derived_from": [r["id"] for r in chunk],
                }
            )
        return {"profiles": profiles}


# --- remote backend ----------------------------------------------------------


class RemoteBackend:
    """Chat-completions client for any compatible HTTP endpoint."""

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        temperature: float = 0.0,
        timeout_s: float = DEFAULT_TIMEOUT_S,
    ):
        self.endpoint = endpoint or os.environ.get(ENV_ENDPOINT, "")
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_API_KEY, "")
        self.model = model or os.environ.get(ENV_MODEL, "")
        self.temperature = temperature
        self.timeout_s = timeout_s
        if not self.endpoint:
            raise BackendError(f"remote backend needs an endpoint ({ENV_ENDPOINT})")

    def complete(self, bundle: PromptBundle) -> BackendResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": bundle.system},
                {"role": "user", "content": bundle.context},
            ],
        }
        try:
            response = httpx.post(
                self.endpoint.rstrip("/") + "/chat/completions",
                json=body,
                headers=headers,
                timeout=self.timeout_s,
            )
        except httpx.TimeoutException as exc:
            raise BackendTimeout(f"backend timed out after {self.timeout_s}s") from exc
        except httpx.HTTPError as exc:
            raise BackendError(f"backend transport failure: {exc}") from exc
        if response.status_code != 200:
            raise HttpError(response.status_code, response.text[:200])
        data = response.json()
        try:
            raw = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError) as exc:
            raise BackendError(f"malformed completion payload: {exc}") from exc
        usage = {
            k: int(v)
            for k, v in (data.get("usage") or {}).items()
            if isinstance(v, (int, float))
        }
        return BackendResponse(
            raw=raw, parsed=parse_stage_output(raw, bundle.stage), usage=usage
        )


def make_backend(kind: str, settings: Mapping[str, Any] | None = None) -> PlannerBackend:
    settings = dict(settings or {})
    if kind == "mock":
        return MockBackend(rules=settings.get("rules"))
    if kind == "remote":
        return RemoteBackend(
            endpoint=settings.get("endpoint"),
            api_key=settings.get("api_key"),
            model=settings.get("model"),
            temperature=float(settings.get("temperature", 0.0)),
            timeout_s=float(settings.get("timeout_s", DEFAULT_TIMEOUT_S)),
        )
    raise BackendError(f"unknown backend kind {kind!r}")
