from datetime import date

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dense.embedding import EmbeddingVector
from dense.index import IndexConflictError, MetadataFilter, VectorIndex
from dense.providers import DimensionMismatchError
from dense.taxonomy import CanonicalNoteType
from helpers import make_chunk, unit

T = CanonicalNoteType
TYPES = [T.RADIOLOGY_REPORTS, T.PROGRESS_NOTES, T.ECG_REPORTS]


def _random_index(rng, n, dim=16, dup_every=0):
    chunks, vecs = [], []
    for i in range(n):
        chunks.append(make_chunk(
            f"text {i}", subject_id=1 + i % 3, hadm_id=100 + i % 5, note_type=TYPES[i % 3],
            section=["Findings", "Plan"][i % 2], chartdate=date(2131, 1, 1 + i % 20), seq_index=i, char_start=i,
        ))
        if dup_every and i % dup_every == 1:
            vecs.append(vecs[-1].copy())
        else:
            vecs.append(unit(rng, dim))
    return VectorIndex(dim, "p").add(chunks, vecs), chunks, vecs


def _oracle(chunks, vecs, q, k, flt=None):
    q = q / np.linalg.norm(q)
    scored = [(c.chunk_id, float(np.dot(v, q))) for c, v in zip(chunks, vecs) if flt is None or flt.matches(c.metadata)]
    scored.sort(key=lambda p: (-p[1], p[0]))
    return scored[:k], scored


def _check_against_oracle(got, chunks, vecs, q, k, flt=None):
    expected, everything = _oracle(chunks, vecs, q, k, flt)
    assert len(got) == len(expected)
    assert np.allclose([s for _, s in got], [s for _, s in expected], atol=1e-12)
    oracle_scores = dict(everything)
    for cid, s in got:
        assert abs(oracle_scores[cid] - s) <= 1e-12
    if got:
        floor = got[-1][1]
        returned = {cid for cid, _ in got}
        assert all(s <= floor + 1e-12 for cid, s in everything if cid not in returned)
    # Ties (bit-identical scores) are ordered by ascending chunk id.
    for (a, sa), (b, sb) in zip(got, got[1:]):
        assert sa > sb or (sa == sb and a < b)


def test_self_retrieval_is_top_hit(rng):
    index, chunks, vecs = _random_index(rng, 50)
    for c, v in zip(chunks, vecs):
        top = index.query_topk(v, 1)
        assert top[0][0] == c.chunk_id
        assert top[0][1] == pytest.approx(1.0, abs=1e-9)


def test_k_larger_than_index_returns_everything(rng):
    index, chunks, _ = _random_index(rng, 7)
    assert len(index.query_topk(unit(rng, 16), 100)) == 7
    assert VectorIndex(16, "p").query_topk(unit(rng, 16), 3) == []
    with pytest.raises(ValueError):
        index.query_topk(unit(rng, 16), 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 120), st.integers(1, 30), st.integers(0, 2**32 - 1), st.sampled_from([0, 2, 3]))
def test_topk_matches_exhaustive_oracle(n, k, seed, dup_every):
    rng = np.random.default_rng(seed)
    index, chunks, vecs = _random_index(rng, n, dup_every=dup_every)
    q = vecs[int(rng.integers(n))] if rng.random() < 0.5 else unit(rng, 16)
    _check_against_oracle(index.query_topk(q, k), chunks, vecs, q, k)


def test_duplicate_vectors_tie_break_by_id(rng):
    v = unit(rng, 8)
    chunks = [make_chunk(f"t{i}", char_start=i) for i in range(6)]
    index = VectorIndex(8, "p").add(chunks, [v] * 6)
    got = index.query_topk(unit(rng, 8), 3)
    assert [cid for cid, _ in got] == sorted(c.chunk_id for c in chunks)[:3]
    assert len({s for _, s in got}) == 1


@pytest.mark.parametrize(
    "flt",
    [
        MetadataFilter(subject_id=2),
        MetadataFilter(subject_id=1, hadm_ids=frozenset({100, 103})),
        MetadataFilter(note_types=frozenset({T.ECG_REPORTS})),
        MetadataFilter(sections=frozenset({"Plan"})),
        MetadataFilter(date_from=date(2131, 1, 5), date_to=date(2131, 1, 9)),
        MetadataFilter(exclude=frozenset({(100, T.RADIOLOGY_REPORTS), (101, T.PROGRESS_NOTES)})),
        MetadataFilter(predicate=lambda m: m.seq_index % 7 == 0),
        MetadataFilter(subject_id=9),
    ],
)
def test_filter_soundness_and_completeness(rng, flt):
    index, chunks, vecs = _random_index(rng, 200)
    q = unit(rng, 16)
    got = index.query_topk(q, 500, flt)
    by_id = {c.chunk_id: c for c in chunks}
    assert all(flt.matches(by_id[cid].metadata) for cid, _ in got)
    assert len(got) == sum(flt.matches(c.metadata) for c in chunks)
    _check_against_oracle(index.query_topk(q, 5, flt), chunks, vecs, q, 5, flt)


def test_add_is_idempotent_and_detects_conflicts(rng):
    c = make_chunk("a")
    v = unit(rng, 4)
    index = VectorIndex(4, "p").add([c], [v])
    index.add([c], [v.copy()])
    assert len(index) == 1
    with pytest.raises(IndexConflictError):
        index.add([c], [unit(rng, 4)])
    with pytest.raises(DimensionMismatchError):
        index.add([make_chunk("b", char_start=9)], [unit(rng, 5)])
    with pytest.raises(DimensionMismatchError):
        index.query_topk(unit(rng, 5), 1)
    with pytest.raises(ValueError):
        index.add([make_chunk("b", char_start=9)], [EmbeddingVector(unit(rng, 4), "other")])
    with pytest.raises(ValueError):
        index.add([c], [])


def test_persistence_round_trip(tmp_path, rng):
    index, chunks, vecs = _random_index(rng, 40)
    index.save(tmp_path / "idx")
    loaded = VectorIndex.load(tmp_path / "idx")
    assert len(loaded) == 40 and loaded.provider_id == "p" and loaded.dimension == 16
    assert loaded.chunks() == index.chunks()
    for c in chunks:
        assert np.array_equal(loaded.vector(c.chunk_id), index.vector(c.chunk_id))
    q = unit(rng, 16)
    assert loaded.query_topk(q, 10) == index.query_topk(q, 10)
