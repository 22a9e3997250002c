from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tidyloop.backends import MockBackend
from tidyloop.errors import (
    BudgetNotExceeded,
    EmptyText,
    PreferenceError,
)
from tidyloop.preferences import (
    HashedBagOfWordsEmbedder,
    PreferenceRecord,
    PreferenceSource,
    PreferenceStore,
    similarity,
)
from tidyloop.scene import ChangeKind, Relation, RelationChange, RelationKind, RelationSource


@pytest.fixture
def backend() -> MockBackend:
    return MockBackend()


def move_changes():
    return [
        RelationChange(
            ChangeKind.RELATION_REMOVED,
            relation=Relation(RelationKind.ON, "book0", "book1", RelationSource.PLANNER),
        ),
        RelationChange(
            ChangeKind.RELATION_ADDED,
            relation=Relation(RelationKind.ON, "table", "book1", RelationSource.HUMAN_ADJUSTMENT),
        ),
    ]


# --- ingestion -----------------------------------------------------------------


def test_ingest_instruction_stores_record():
    store = PreferenceStore()
    record = store.ingest_instruction(
        "I prefer everything to be laid flat on the table rather than stacked together",
        scope_tags=["tidy"],
    )
    assert record.source is PreferenceSource.INSTRUCTION
    assert record.scope_tags == ["tidy"]
    assert store.prompt_records() == [record]


def test_ingest_empty_text_rejected():
    store = PreferenceStore()
    with pytest.raises(EmptyText):
        store.ingest_instruction("")
    with pytest.raises(EmptyText):
        store.ingest_instruction("   ")


def test_duplicate_text_stored_twice():
    store = PreferenceStore()
    first = store.ingest_instruction("no stacking")
    second = store.ingest_instruction("no stacking")
    assert first.id != second.id
    assert len(store) == 2


def test_extract_from_adjustment(backend):
    store = PreferenceStore()
    record = store.extract_from_adjustment(move_changes(), backend)
    assert record.source is PreferenceSource.ADJUSTMENT
    assert "placed on the" in record.text
    assert record.evidence  # diff attached
    assert len(record.evidence) == 2


def test_extract_empty_diff_rejected(backend):
    store = PreferenceStore()
    with pytest.raises(PreferenceError):
        store.extract_from_adjustment([], backend)


def test_extract_state_flip(backend):
    store = PreferenceStore()
    changes = [
        RelationChange(
            ChangeKind.STATE_CHANGED, object_id="box0", state="open", before=False, after=True
        )
    ]
    record = store.extract_from_adjustment(changes, backend)
    assert "open" in record.text


# --- profiling -----------------------------------------------------------------


def seeded_store(n: int = 9, budget: int = 60) -> PreferenceStore:
    store = PreferenceStore(token_budget=budget)
    for i in range(n):
        store.records.append(
            PreferenceRecord(
                id=f"p{i:04d}",
                text=f"avoid stacking the {['books','plates','mugs','boxes','magazines','towels','cups','bowls','pens'][i % 9]} on item {i}",
                source=PreferenceSource.INSTRUCTION,
                scope_tags=["tidy"],
                created_at=i + 1,
            )
        )
    store._clock = n
    return store


def test_profile_compresses_store(backend):
    store = seeded_store()
    assert store.token_estimate > store.token_budget
    created = store.profile(backend)
    assert 1 <= len(created) <= math.ceil(9 / 3)
    for record in created:
        assert record.source is PreferenceSource.PROFILE
        assert len(record.derived_from) >= 2
    assert store.token_estimate <= store.token_budget


def test_profile_under_budget_rejected(backend):
    store = PreferenceStore(token_budget=10_000)
    store.ingest_instruction("tiny preference")
    with pytest.raises(BudgetNotExceeded):
        store.profile(backend)


def test_prompt_records_after_profile(backend):
    store = seeded_store()
    store.profile(backend)
    later = store.ingest_instruction("new preference after the pass")
    prompted = store.prompt_records()
    sources = {r.source for r in prompted}
    assert sources <= {PreferenceSource.PROFILE, PreferenceSource.INSTRUCTION}
    raw_prompted = [r for r in prompted if r.source is not PreferenceSource.PROFILE]
    assert raw_prompted == [later]  # old raws are archived, newer ones prompt
    # archived originals stay retrievable
    assert any(r.archived for r in store.records)


def test_insert_over_budget_triggers_profile(backend):
    store = PreferenceStore(token_budget=80)
    for i in range(8):
        store.ingest_instruction(f"avoid stacking anything on shelf number {i}", backend=backend)
    assert store.token_estimate <= store.token_budget
    assert any(r.source is PreferenceSource.PROFILE for r in store.records)


def test_profile_record_requires_two_parents():
    with pytest.raises(PreferenceError):
        PreferenceRecord(
            id="p1", text="general", source=PreferenceSource.PROFILE, derived_from=["only-one"]
        )


# --- persistence ----------------------------------------------------------------


def test_store_round_trip(tmp_path, backend):
    store = seeded_store()
    store.profile(backend)
    store.ingest_instruction("fresh preference", scope_tags=["tidy"])
    path = str(tmp_path / "prefs.jsonl")
    store.save(path)
    loaded = PreferenceStore.load(path)
    assert loaded.token_budget == store.token_budget
    assert [r.to_dict() for r in loaded.records] == [r.to_dict() for r in store.records]
    profile_records = [r for r in loaded.records if r.source is PreferenceSource.PROFILE]
    assert profile_records and all(len(r.derived_from) >= 2 for r in profile_records)


# --- similarity -----------------------------------------------------------------


def test_similarity_identical_strings():
    assert similarity("no stacking books", "no stacking books") == pytest.approx(1.0, abs=1e-9)


def test_similarity_disjoint_strings():
    assert similarity("alpha beta gamma", "delta epsilon zeta") == pytest.approx(0.0, abs=1e-12)


def test_similarity_matches_term_vector_oracle():
    # tf vectors: {no, stacking, books} vs {avoid, stacking, the, books}
    # dot = 2, norms = sqrt(3) and 2 -> cos = 1/sqrt(3)
    value = similarity("no stacking books", "avoid stacking the books")
    assert value == pytest.approx(1.0 / math.sqrt(3.0), abs=1e-9)


def test_similarity_empty_text_rejected():
    with pytest.raises(EmptyText):
        similarity("", "books")
    with pytest.raises(EmptyText):
        similarity("books", "   ")


@settings(max_examples=40, deadline=None)
@given(st.text(alphabet="abcdefgh transport", min_size=1, max_size=60))
def test_similarity_self_is_one_or_empty(text):
    embedder = HashedBagOfWordsEmbedder()
    if not embedder.embed(text):
        return  # no tokens: cosine undefined, similarity reports 0
    assert similarity(text, text) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(
    st.text(alphabet="abc def", min_size=1, max_size=40),
    st.text(alphabet="abc def", min_size=1, max_size=40),
)
def test_similarity_symmetric(a, b):
    embedder = HashedBagOfWordsEmbedder()
    if not embedder.embed(a) or not embedder.embed(b):
        return
    assert similarity(a, b) == pytest.approx(similarity(b, a), abs=1e-12)
