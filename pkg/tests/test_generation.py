import json
from datetime import date

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dense.corpus import PatientTimeline, VisitRecord
from dense.embedding import HashingEmbedder, embed_texts
from dense.generation import (
    INSTRUCTIONS,
    NO_PRIOR_CONTENT,
    SUMMARY_CAP,
    GeneratedNote,
    MockProvider,
    PromptContractError,
    PromptMode,
    PromptSpec,
    RemoteGenerator,
    ResponseCache,
    build_prompt,
    generate_note,
    parse_soap,
    run_patient,
    summarize_previous_note,
    summary_digest,
)
from dense.index import VectorIndex
from dense.providers import TransportError
from dense.retrieval import EvidenceBundle, EvidenceItem, QueryEncoder
from dense.taxonomy import NOTE_TYPES, CanonicalNoteType
from helpers import make_chunk

T = CanonicalNoteType


def _bundle(n=3, visit_index=0, text="Lungs clear. Heart regular.", facets=("Objective", "Plan", "Assessment")):
    items = [
        EvidenceItem(make_chunk(f"{text} #{i}", chartdate=date(2131, 1, 1 + i), seq_index=i, char_start=i), facets[i % len(facets)], 0.1 * i, 0.1 * i)
        for i in range(n)
    ]
    return EvidenceBundle(1, 100, visit_index, items)


def test_first_visit_is_enrichment():
    spec = build_prompt(_bundle(), None, 0)
    assert spec.mode is PromptMode.ENRICHMENT and spec.previous_summary is None
    text = spec.render()
    assert text.startswith(INSTRUCTIONS)
    assert "Prior visit summary:" not in text
    assert "[radiology_reports | 2131-01-01 | Findings]\nLungs clear. Heart regular. #0" in text


def test_later_visit_is_temporal():
    spec = build_prompt(_bundle(), "Stable.", 3)
    assert spec.mode is PromptMode.TEMPORAL
    assert "Prior visit summary:\nStable.\n\nEvidence:" in spec.render()


def test_mode_contract_violations():
    with pytest.raises(PromptContractError):
        build_prompt(_bundle(), None, 1)
    with pytest.raises(PromptContractError):
        build_prompt(_bundle(), "x", 0)
    with pytest.raises(PromptContractError):
        PromptSpec(PromptMode.ENRICHMENT, 1, 100, 2, (), "x")
    with pytest.raises(PromptContractError):
        PromptSpec(PromptMode.TEMPORAL, 1, 100, 0, (), None)


def test_empty_bundle_still_renders():
    spec = build_prompt(EvidenceBundle(1, 100, 0, []), None, 0)
    assert spec.evidence == () and spec.render().endswith("Evidence:")


def _truncation_oracle(bundle, summary, visit_index, max_chars):
    full = build_prompt(bundle, summary, visit_index, 10**9)
    order = sorted(full.evidence, key=lambda b: (b.score, b.chartdate, b.chunk_id))
    for j in range(len(order) + 1):
        gone = {b.chunk_id for b in order[:j]}
        kept = tuple(b for b in full.evidence if b.chunk_id not in gone)
        candidate = PromptSpec(full.mode, 1, 100, visit_index, kept, summary)
        if len(candidate.render()) <= max_chars:
            return kept
    return None


@settings(max_examples=150)
@given(st.integers(0, 12), st.integers(200, 3000), st.booleans())
def test_truncation_matches_oracle(n, budget, temporal):
    summary = "Prior assessment stable. Continue antibiotics." if temporal else None
    bundle = _bundle(n, text="Evidence sentence with several words. " * 3)
    expected = _truncation_oracle(bundle, summary, int(temporal), budget)
    if expected is None:
        with pytest.raises(PromptContractError):
            build_prompt(bundle, summary, int(temporal), budget)
        return
    spec = build_prompt(bundle, summary, int(temporal), budget)
    assert spec.evidence == expected
    assert len(spec.render()) <= budget
    # The summary always survives truncation.
    assert spec.previous_summary == summary
    assert set(spec.dropped) | {b.chunk_id for b in spec.evidence} == {i.chunk.chunk_id for i in bundle.items}


def test_mock_always_emits_four_sections():
    mock = MockProvider()
    for bundle in (_bundle(), EvidenceBundle(1, 100, 0, [])):
        note = generate_note(mock, build_prompt(bundle, None, 0))
        assert all(note.sections().values())
        assert note.warnings == []


def test_mock_temporal_references_prior():
    mock = MockProvider()
    note = generate_note(mock, build_prompt(_bundle(), "Pneumonia improving. Day 3 of ceftriaxone.", 1))
    assert "Previously: Pneumonia improving." in note.assessment


def test_cache_hits_skip_provider(tmp_path):
    mock = MockProvider()
    cache = ResponseCache(tmp_path / "cache")
    prompt = build_prompt(_bundle(), None, 0)
    first = generate_note(mock, prompt, cache)
    second = generate_note(mock, prompt, cache)
    assert mock.calls == 1
    assert first == second
    assert cache.get("other-provider", prompt.digest()) is None
    assert not list((tmp_path / "cache").rglob("*.tmp"))


def test_prompt_over_provider_budget_is_rejected():
    spec = build_prompt(_bundle(), None, 0)
    with pytest.raises(PromptContractError):
        generate_note(MockProvider(max_prompt_chars=50), spec)


@pytest.mark.parametrize(
    "raw, expected",
    [
        ("Subjective: a\nObjective: b\nAssessment: c\nPlan: d", ("a", "b", "c", "d")),
        ("**Subjective:** a\n## Objective\nb\n# Assessment:\nc\n__Plan:__ d", ("a", "b", "c", "d")),
        ("Assessment: c\n- Plan: stays a bullet", ("", "", "c\n- Plan: stays a bullet", "")),
        ("S: a\nO: b\nA: c\nP: d", ("a", "b", "c", "d")),
        ("Subjective\nfeels fine\nPlan\nrest", ("feels fine", "", "", "rest")),
        ("A patient was seen.\nPlan: d", ("", "", "", "d")),
    ],
)
def test_parse_soap_examples(raw, expected):
    parsed = parse_soap(raw)
    assert (parsed.subjective, parsed.objective, parsed.assessment, parsed.plan) == expected


def test_parse_soap_warnings():
    assert parse_soap("Subjective: a\nObjective: b\nAssessment: c\nPlan: d").warnings == []
    assert "missing Objective" in parse_soap("Subjective: a\nAssessment: c\nPlan: d").warnings
    assert "no SOAP headers found" in parse_soap("just prose").warnings
    assert any("discarded" in w for w in parse_soap("intro\nPlan: d").warnings)


@given(st.text(max_size=200))
def test_parse_soap_never_raises(text):
    parse_soap(text)


def _note(assessment, plan):
    return GeneratedNote(1, 100, 0, "s", "o", assessment, plan, "", {}, "p")


def test_summary_picks_assessment_plan_and_cues():
    plan = " ".join(["Give fluids.", "Start heparin.", "Check labs.", "Repeat CXR.", "Consult GI.", "Wean O2.", "Continue lasix daily.", "Discharge soon."])
    summary = summarize_previous_note(_note("Pneumonia improving. Renal function stable. Anemia chronic.", plan))
    assert summary == "Pneumonia improving. Renal function stable. Give fluids. Start heparin. Continue lasix daily."
    assert summarize_previous_note(_note("", "")) == NO_PRIOR_CONTENT


def test_summary_is_capped():
    long = ("Word " * 300).strip() + "."
    summary = summarize_previous_note(_note(long + " Second.", "Plan sentence."))
    assert len(summary) <= SUMMARY_CAP


class _Timeline:
    @staticmethod
    def build(n_visits):
        visits, chunks = [], []
        for v in range(n_visits):
            notes = {t: "" for t in NOTE_TYPES}
            notes[T.RADIOLOGY_REPORTS] = "x"
            visits.append(VisitRecord(1, 100 + v, date(2131, 1, 1 + v), notes))
            chunks.append(make_chunk(f"Visit {v} chest film shows clear lungs. Follow-up imaging.", hadm_id=100 + v, chartdate=date(2131, 1, 1 + v), seq_index=0))
            chunks.append(make_chunk(f"Visit {v} plan continue diuresis.", hadm_id=100 + v, chartdate=date(2131, 1, 1 + v), section="Impression", seq_index=1, char_start=5))
        emb = HashingEmbedder(64)
        index = VectorIndex(64, emb.provider_id)
        index.add(chunks, embed_texts(emb, [c.text for c in chunks]))
        norms = [np.linalg.norm(r) for r in (index.vector(c.chunk_id) for c in chunks)]
        assert np.allclose(norms, 1.0)
        return PatientTimeline(1, visits), index, QueryEncoder(emb)


def test_run_patient_lineage():
    tl, index, enc = _Timeline.build(5)
    run = run_patient(MockProvider(), index, tl, enc)
    assert run.failures == []
    assert [n.visit_index for n in run.notes] == list(range(5))
    assert run.notes[0].prompt_lineage["mode"] == "enrichment"
    assert run.notes[0].prompt_lineage["summary_digest"] is None
    for prev, cur in zip(run.notes, run.notes[1:]):
        assert cur.prompt_lineage["mode"] == "temporal"
        assert cur.prompt_lineage["summary_digest"] == summary_digest(summarize_previous_note(prev))
        assert cur.prompt_lineage["summary_source_visit"] == prev.visit_index


class FailOn:
    """Mock provider that fails with a transport error on chosen visits."""

    def __init__(self, bad):
        self.inner = MockProvider()
        self.bad = set(bad)
        self.provider_id = "failing"
        self.max_prompt_chars = self.inner.max_prompt_chars
        self.deterministic = True

    def generate(self, prompt):
        if prompt.visit_index in self.bad:
            raise TransportError("boom")
        return self.inner.generate(prompt)


def test_failed_visit_is_recorded_and_skipped_over():
    tl, index, enc = _Timeline.build(5)
    run = run_patient(FailOn({2}), index, tl, enc, sleep=lambda s: None)
    assert [f.visit_index for f in run.failures] == [2]
    assert [n.visit_index for n in run.notes] == [0, 1, 3, 4]
    by_visit = {n.visit_index: n for n in run.notes}
    assert by_visit[3].prompt_lineage["summary_source_visit"] == 1
    assert by_visit[3].prompt_lineage["summary_digest"] == summary_digest(summarize_previous_note(by_visit[1]))


def test_first_visit_failure_uses_placeholder_summary():
    tl, index, enc = _Timeline.build(3)
    run = run_patient(FailOn({0}), index, tl, enc, sleep=lambda s: None)
    assert run.notes[0].visit_index == 1
    assert run.notes[0].prompt_lineage["summary_source_visit"] is None
    assert run.notes[0].prompt_lineage["summary_digest"] == summary_digest(NO_PRIOR_CONTENT)


def test_generated_note_round_trip():
    tl, index, enc = _Timeline.build(2)
    note = run_patient(MockProvider(), index, tl, enc).notes[1]
    assert GeneratedNote.from_dict(json.loads(json.dumps(note.to_dict()))) == note


def test_remote_generator_posts_prompt():
    seen = []

    def handler(request):
        seen.append((request.url.path, json.loads(request.content), request.headers.get("authorization")))
        return httpx.Response(200, json={"text": "Subjective: a\nObjective: b\nAssessment: c\nPlan: d"})

    gen = RemoteGenerator("http://gen.test/", api_key="k", client=httpx.Client(transport=httpx.MockTransport(handler)))
    prompt = build_prompt(_bundle(), None, 0)
    note = generate_note(gen, prompt)
    assert note.plan == "d"
    path, body, auth = seen[0]
    assert path == "/generate" and body["prompt"] == prompt.render() and auth == "Bearer k"


def test_remote_generator_retries_then_fails():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(200, json={"no_text": True})

    gen = RemoteGenerator("http://gen.test", client=httpx.Client(transport=httpx.MockTransport(handler)))
    with pytest.raises(Exception, match=r"visit \(1, 100\)"):
        generate_note(gen, build_prompt(_bundle(), None, 0), sleep=lambda s: None)
    assert len(calls) == 3
