"""Human preference store: instructions, adjustment-derived preferences,
periodic profiling into higher-level records, and similarity scoring.

Timestamps are logical sequence numbers so sessions replay byte-for-byte;
persistence is an append-only JSONL log, one event per line.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Sequence

import httpx
import numpy as np

from .backends import PlannerBackend, Stage, assemble, estimate_tokens
from .errors import (
    BudgetNotExceeded,
    CompressionFailed,
    EmbedderError,
    EmptyText,
    PreferenceError,
)
from .scene import RelationChange, canonical_dumps

DEFAULT_TOKEN_BUDGET = 3000
HASH_DIMENSIONS = 2 ** 14

ENV_EMBED_URL = "TIDYLOOP_EMBED_URL"


class PreferenceSource(str, Enum):
    INSTRUCTION = "instruction"
    ADJUSTMENT = "adjustment"
    PROFILE = "profile"


@dataclass
class PreferenceRecord:
    id: str
    text: str
    source: PreferenceSource
    scope_tags: list[str] = field(default_factory=list)
    created_at: int = 0
    derived_from: list[str] = field(default_factory=list)
    archived: bool = False
    evidence: list[dict[str, Any]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.source = PreferenceSource(self.source)
        if not self.text.strip():
            raise EmptyText("preference text must be non-empty")
        if self.source is PreferenceSource.PROFILE and len(self.derived_from) < 2:
            raise PreferenceError("profile records must reference at least two parents")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "text": self.text,
            "source": self.source.value,
            "scope_tags": list(self.scope_tags),
            "created_at": self.created_at,
            "derived_from": list(self.derived_from),
            "archived": self.archived,
            "evidence": list(self.evidence),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PreferenceRecord":
        return cls(
            id=data["id"],
            text=data["text"],
            source=PreferenceSource(data["source"]),
            scope_tags=list(data.get("scope_tags", [])),
            created_at=int(data.get("created_at", 0)),
            derived_from=list(data.get("derived_from", [])),
            archived=bool(data.get("archived", False)),
            evidence=list(data.get("evidence", [])),
        )


class PreferenceStore:
    """Single-writer store of preference records with a prompt token budget.

    Inserting past the budget triggers a profiling pass when a backend is
    available; archived originals stay retrievable but leave the prompt.
    """

    def __init__(self, token_budget: int = DEFAULT_TOKEN_BUDGET):
        self.token_budget = token_budget
        self.records: list[PreferenceRecord] = []
        self._clock = 0

    # -- basics ---------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.records)

    def get(self, record_id: str) -> PreferenceRecord:
        for record in self.records:
            if record.id == record_id:
                return record
        raise KeyError(record_id)

    def _next_id(self) -> str:
        return f"p{len(self.records):04d}"

    def _tick(self) -> int:
        self._clock += 1
        return self._clock

    def active_records(self) -> list[PreferenceRecord]:
        return [r for r in self.records if not r.archived]

    def prompt_records(self) -> list[PreferenceRecord]:
        """Records eligible for prompt assembly: profiles plus unarchived raws."""
        return self.active_records()

    @property
    def token_estimate(self) -> int:
        return estimate_tokens("".join(r.text for r in self.active_records()))

    # -- ingestion ---------------------------------------------------------------

    def ingest_instruction(
        self,
        text: str,
        scope_tags: Sequence[str] = (),
        backend: PlannerBackend | None = None,
    ) -> PreferenceRecord:
        if not text or not text.strip():
            raise EmptyText("instruction text must be non-empty")
        record = PreferenceRecord(
            id=self._next_id(),
            text=text.strip(),
            source=PreferenceSource.INSTRUCTION,
            scope_tags=list(scope_tags),
            created_at=self._tick(),
        )
        self.records.append(record)
        self._maybe_profile(backend)
        return record

    def extract_from_adjustment(
        self,
        changes: Sequence[RelationChange],
        backend: PlannerBackend,
        scene=None,
    ) -> PreferenceRecord:
        """Summarize a human scene adjustment into one stored preference."""
        if not changes:
            raise PreferenceError("adjustment diff must be non-empty")
        change_dicts = [c.to_dict() for c in changes]
        bundle = assemble(
            Stage.SUMMARIZE_ADJUSTMENT,
            scene,
            instruction="",
            changes=change_dicts,
        )
        response = backend.complete(bundle)
        payload = response.parsed
        record = PreferenceRecord(
            id=self._next_id(),
            text=payload["preference"],
            source=PreferenceSource.ADJUSTMENT,
            scope_tags=list(payload.get("scope_tags", [])),
            created_at=self._tick(),
            evidence=change_dicts,
        )
        self.records.append(record)
        self._maybe_profile(backend)
        return record

    # -- profiling ---------------------------------------------------------------

    def _maybe_profile(self, backend: PlannerBackend | None) -> None:
        if backend is not None and self.token_estimate > self.token_budget:
            self.profile(backend)

    def profile(self, backend: PlannerBackend) -> list[PreferenceRecord]:
        """Compress accumulated raw records into fewer profile records."""
        if self.token_estimate <= self.token_budget:
            raise BudgetNotExceeded(
                f"store estimates {self.token_estimate} tokens, budget is {self.token_budget}"
            )
        raw = [
            r
            for r in self.active_records()
            if r.source is not PreferenceSource.PROFILE
        ]
        if not raw:
            raise CompressionFailed("nothing left to compress: profiles alone exceed the budget")
        record_payload = [
            {"id": r.id, "text": r.text, "scope_tags": list(r.scope_tags)} for r in raw
        ]
        bundle = assemble(Stage.PROFILE, None, instruction="", records=record_payload)
        response = backend.complete(bundle)
        profiles_payload = response.parsed["profiles"]
        limit = math.ceil(len(raw) / 3)
        if len(profiles_payload) > limit:
            raise CompressionFailed(
                f"profiling produced {len(profiles_payload)} records, cap is {limit}"
            )
        raw_ids = {r.id for r in raw}
        created: list[PreferenceRecord] = []
        for payload in profiles_payload:
            parents = [p for p in payload["derived_from"] if p in raw_ids]
            if len(parents) < 2:
                raise CompressionFailed("profile cites fewer than two known records")
            record = PreferenceRecord(
                id=self._next_id(),
                text=payload["text"],
                source=PreferenceSource.PROFILE,
                scope_tags=list(payload.get("scope_tags", [])),
                created_at=self._tick(),
                derived_from=parents,
            )
            self.records.append(record)
            created.append(record)
        # archive every raw record that existed at pass time: the prompt keeps
        # profiles plus records newer than the pass only
        for record in raw:
            record.archived = True
        if self.token_estimate > self.token_budget:
            raise CompressionFailed(
                f"post-profile estimate {self.token_estimate} still over budget {self.token_budget}"
            )
        return created

    # -- persistence ---------------------------------------------------------------

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(canonical_dumps({"event": "meta", "token_budget": self.token_budget, "clock": self._clock}))
            fh.write("\n")
            for record in self.records:
                fh.write(canonical_dumps({"event": "record", "data": record.to_dict()}))
                fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "PreferenceStore":
        store = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                if entry["event"] == "meta":
                    store.token_budget = int(entry["token_budget"])
                    store._clock = int(entry["clock"])
                elif entry["event"] == "record":
                    store.records.append(PreferenceRecord.from_dict(entry["data"]))
        return store

    def to_dict(self) -> dict[str, Any]:
        return {
            "token_budget": self.token_budget,
            "clock": self._clock,
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PreferenceStore":
        store = cls(token_budget=int(data.get("token_budget", DEFAULT_TOKEN_BUDGET)))
        store._clock = int(data.get("clock", 0))
        store.records = [PreferenceRecord.from_dict(r) for r in data.get("records", [])]
        return store


# --- similarity ---------------------------------------------------------------


_TOKEN_PATTERN = re.compile(r"[a-z0-9]+")


class HashedBagOfWordsEmbedder:
    """Deterministic offline embedder: lower-cased, punctuation-stripped
    term counts under feature hashing (md5 mod 2^14)."""

    dimensions = HASH_DIMENSIONS

    def embed(self, text: str) -> dict[int, float]:
        counts: dict[int, float] = {}
        for token in _TOKEN_PATTERN.findall(text.lower()):
            digest = hashlib.md5(token.encode("utf-8")).digest()
            index = int.from_bytes(digest[:8], "big") % self.dimensions
            counts[index] = counts.get(index, 0.0) + 1.0
        return counts


class RemoteEmbedder:
    """Client for an embedding endpoint configured via environment."""

    def __init__(self, endpoint: str | None = None, timeout_s: float = 30.0):
        self.endpoint = endpoint or os.environ.get(ENV_EMBED_URL, "")
        self.timeout_s = timeout_s
        if not self.endpoint:
            raise EmbedderError(f"remote embedder needs an endpoint ({ENV_EMBED_URL})")

    def embed(self, text: str) -> np.ndarray:
        try:
            response = httpx.post(
                self.endpoint, json={"input": [text]}, timeout=self.timeout_s
            )
        except httpx.HTTPError as exc:
            raise EmbedderError(f"embedding request failed: {exc}") from exc
        if response.status_code != 200:
            raise EmbedderError(f"embedding endpoint returned {response.status_code}")
        try:
            vector = response.json()["data"][0]["embedding"]
        except (KeyError, IndexError, ValueError) as exc:
            raise EmbedderError(f"malformed embedding payload: {exc}") from exc
        return np.asarray(vector, dtype=float)


def _cosine(a: Any, b: Any) -> float:
    if isinstance(a, dict) and isinstance(b, dict):
        if not a or not b:
            return 0.0
        dot = sum(v * b.get(k, 0.0) for k, v in a.items())
        norm_a = math.sqrt(sum(v * v for v in a.values()))
        norm_b = math.sqrt(sum(v * v for v in b.values()))
    else:
        va, vb = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        if va.size == 0 or vb.size == 0:
            return 0.0
        dot = float(va @ vb)
        norm_a = float(np.linalg.norm(va))
        norm_b = float(np.linalg.norm(vb))
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    return dot / (norm_a * norm_b)


def similarity(learned: str, ground_truth: str, embedder=None) -> float:
    """Cosine similarity of two preference texts under the given embedder."""
    if not learned or not learned.strip() or not ground_truth or not ground_truth.strip():
        raise EmptyText("similarity needs two non-empty texts")
    if embedder is None:
        embedder = HashedBagOfWordsEmbedder()
    try:
        va = embedder.embed(learned)
        vb = embedder.embed(ground_truth)
    except EmbedderError:
        raise
    except Exception as exc:
        raise EmbedderError(f"embedder failed: {exc}") from exc
    return _cosine(va, vb)
