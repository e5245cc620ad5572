import pytest

from dense.corpus import notes_to_csv_string
from dense.preprocess import default_catalog, preprocess_note
from dense.synthetic import (
    DEFAULT_COVERAGE,
    LABELS,
    SyntheticCorpusSpec,
    SyntheticSpecError,
    generate_synthetic_corpus,
    observed_coverage,
)
from dense.taxonomy import NOTE_TYPES, CanonicalNoteType, classify_labels, classify_note

T = CanonicalNoteType


def test_same_seed_same_corpus():
    spec = SyntheticCorpusSpec(4, 3, 6, seed=7)
    assert notes_to_csv_string(generate_synthetic_corpus(spec)) == notes_to_csv_string(generate_synthetic_corpus(spec))
    other = SyntheticCorpusSpec(4, 3, 6, seed=8)
    assert notes_to_csv_string(generate_synthetic_corpus(other)) != notes_to_csv_string(generate_synthetic_corpus(spec))


def test_patient_streams_are_independent():
    # Adding patients does not change earlier patients' notes.
    small = generate_synthetic_corpus(SyntheticCorpusSpec(2, 3, 5))
    large = generate_synthetic_corpus(SyntheticCorpusSpec(3, 3, 5))
    assert [r.text for r in small] == [r.text for r in large[: len(small)]]


@pytest.mark.parametrize(
    "kwargs",
    [dict(patient_count=0), dict(patient_count=1, min_visits=0), dict(patient_count=1, min_visits=9, max_visits=5),
     dict(patient_count=1, coverage={T.RADIOLOGY_REPORTS: 1.5})],
)
def test_spec_validation(kwargs):
    with pytest.raises(SyntheticSpecError):
        SyntheticCorpusSpec(**kwargs)


def test_visit_counts_and_row_ids():
    records = generate_synthetic_corpus(SyntheticCorpusSpec(6, 10, 57))
    per_patient = {}
    for r in records:
        per_patient.setdefault(r.subject_id, set()).add(r.hadm_id)
    assert len(per_patient) == 6
    assert all(10 <= len(v) <= 57 for v in per_patient.values())
    assert [r.row_id for r in records] == list(range(1, len(records) + 1))


def test_every_visit_has_a_note_even_with_zero_coverage():
    spec = SyntheticCorpusSpec(2, 3, 3, coverage={t: 0.0 for t in NOTE_TYPES} | {T.ECG_REPORTS: 0.01})
    records = generate_synthetic_corpus(spec)
    assert len({(r.subject_id, r.hadm_id) for r in records}) == 6
    assert {classify_note(r) for r in records} == {T.ECG_REPORTS}


def test_labels_classify_back_to_their_type():
    for t in NOTE_TYPES:
        for category, description in LABELS[t]:
            assert classify_labels(category, description) is t, (category, description)


def test_notes_use_catalog_headers_and_placeholders():
    records = generate_synthetic_corpus(SyntheticCorpusSpec(3, 3, 4, coverage={t: 1.0 for t in NOTE_TYPES}))
    catalog = default_catalog()
    assert any("[**" in r.text for r in records)
    for r in records:
        t = classify_note(r)
        note = preprocess_note(r.text, t)
        headers = {h for h, _ in note.sections}
        assert headers <= set(catalog.headers(t)), (t, headers)
        assert all(body for _, body in note.sections)


def test_coverage_tracks_targets():
    records = generate_synthetic_corpus(SyntheticCorpusSpec(60, 30, 50, seed=3))
    coverage = observed_coverage(records, classify_note)
    for t, target in DEFAULT_COVERAGE.items():
        assert abs(coverage[t] - target) <= 0.05, (t, coverage[t], target)
