"""Global and local evidence retrieval for one visit, with dedup and chronological ordering."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .chunker import Chunk
from .corpus import PatientTimeline
from .embedding import EmbeddingProvider, embed_texts
from .index import MetadataFilter, VectorIndex
from .taxonomy import CanonicalNoteType

FACETS = ("Subjective", "Objective", "Assessment", "Plan")

DEFAULT_QUERY_TEXT = {
    "Subjective": "What symptoms and complaints did the patient report?",
    "Objective": "What were the vital signs, examination and test findings?",
    "Assessment": "What diagnoses and clinical assessments were made?",
    "Plan": "What treatments were provided?",
}

# One targeted query per note type: (facet it feeds, query text).
LOCAL_QUERIES: dict[CanonicalNoteType, tuple[str, str]] = {
    CanonicalNoteType.ADMISSION_NOTES: ("Subjective", "chief complaint and history of present illness"),
    CanonicalNoteType.CONSULT_NOTES: ("Assessment", "consultant assessment and recommendations"),
    CanonicalNoteType.DISCHARGE_PLANNING: ("Plan", "discharge needs and follow-up arrangements"),
    CanonicalNoteType.DISCHARGE_SUMMARY: ("Assessment", "hospital course and discharge diagnosis"),
    CanonicalNoteType.ECG_REPORTS: ("Objective", "ECG rhythm and findings"),
    CanonicalNoteType.ECHO_REPORTS: ("Objective", "echocardiogram findings and ejection fraction"),
    CanonicalNoteType.EVENT_NOTES: ("Assessment", "clinical event and response"),
    CanonicalNoteType.MISC_NOTES: ("Subjective", "other relevant clinical information"),
    CanonicalNoteType.NURSING_OTHER_NOTES: ("Subjective", "patient comfort, pain and nursing assessment"),
    CanonicalNoteType.NURSING_SHIFT_NOTES: ("Objective", "shift assessment and interventions"),
    CanonicalNoteType.NUTRITION_NOTES: ("Plan", "diet, weight and nutrition recommendations"),
    CanonicalNoteType.PHARMACY_NOTES: ("Plan", "medication dosing recommendations"),
    CanonicalNoteType.PROCEDURE_NOTES: ("Plan", "procedure indication, findings and complications"),
    CanonicalNoteType.PROGRESS_NOTES: ("Assessment", "prior assessment and plan"),
    CanonicalNoteType.RADIOLOGY_REPORTS: ("Objective", "imaging findings and impression"),
    CanonicalNoteType.TRANSFER_NOTES: ("Plan", "reason for transfer and current status"),
}

OBJECTIVE_SECTIONS = frozenset(
    {
        "Findings",
        "Physical Exam",
        "Physical Assessment",
        "Objective",
        "Impression",
        "Rhythm Analysis",
        "Ejection Fraction",
        "Fluid Balance",
        "Weight",
    }
)
SECTION_BONUS = 0.05


class RetrievalMode(str, Enum):
    GLOBAL = "global"
    LOCAL = "local"


@dataclass(frozen=True)
class RetrievalQuery:
    soap_facet: str
    query_text: str
    mode: RetrievalMode = RetrievalMode.GLOBAL
    target_note_type: CanonicalNoteType | None = None
    k: int = 4

    def __post_init__(self):
        if self.soap_facet not in FACETS:
            raise ValueError(f"unknown SOAP facet {self.soap_facet!r}")
        if self.mode is RetrievalMode.LOCAL and self.target_note_type is None:
            raise ValueError("local queries need a target_note_type")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


def default_queries(path: str | Path | None = None, k: int = 4) -> list[RetrievalQuery]:
    """The four global facet queries, optionally overridden by a ``facet<TAB>query`` file."""
    texts = dict(DEFAULT_QUERY_TEXT)
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            facet, sep, text = line.partition("\t")
            facet = facet.strip()
            if not sep or facet not in FACETS or not text.strip():
                raise ValueError(f"{path}:{lineno}: expected '<facet>\\t<query>' with facet in {FACETS}")
            texts[facet] = text.strip()
    return [RetrievalQuery(f, texts[f], RetrievalMode.GLOBAL, None, k) for f in FACETS]


def local_queries(note_types: Iterable[CanonicalNoteType], k: int = 2) -> list[RetrievalQuery]:
    out = []
    for t in note_types:
        facet, text = LOCAL_QUERIES[t]
        out.append(RetrievalQuery(facet, text, RetrievalMode.LOCAL, t, k))
    return out


@dataclass(frozen=True)
class RetrievalParams:
    k_global: int = 4
    k_local: int = 2
    recency_horizon: int = 3
    near_duplicate_cosine: float | None = None

    def __post_init__(self):
        if self.k_global < 1 or self.k_local < 1:
            raise ValueError("k_global and k_local must be >= 1")
        if self.recency_horizon < 0:
            raise ValueError(f"recency_horizon must be >= 0, got {self.recency_horizon}")
        if self.near_duplicate_cosine is not None and not -1.0 <= self.near_duplicate_cosine <= 1.0:
            raise ValueError("near_duplicate_cosine must lie in [-1, 1]")


@dataclass(frozen=True)
class EvidenceItem:
    chunk: Chunk
    facet: str
    cosine: float
    score: float

    def order_key(self) -> tuple:
        m = self.chunk.metadata
        return (m.chartdate or date.min, m.seq_index, self.chunk.chunk_id)


@dataclass
class EvidenceBundle:
    subject_id: int
    hadm_id: int
    visit_index: int
    items: list[EvidenceItem] = field(default_factory=list)

    @property
    def key(self) -> tuple[int, int]:
        return (self.subject_id, self.hadm_id)

    def dump_rows(self) -> list[dict]:
        rows = []
        for item in self.items:
            m = item.chunk.metadata
            rows.append(
                {
                    "subject_id": self.subject_id,
                    "hadm_id": self.hadm_id,
                    "visit_index": self.visit_index,
                    "chunk_id": item.chunk.chunk_id,
                    "source_hadm_id": m.hadm_id,
                    "note_type": m.note_type.value,
                    "section": m.section,
                    "chartdate": None if m.chartdate is None else m.chartdate.isoformat(),
                    "seq_index": m.seq_index,
                    "facet": item.facet,
                    "cosine": item.cosine,
                    "score": item.score,
                }
            )
        return rows


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def dedup_and_order(
    items: Iterable[EvidenceItem],
    near_duplicate_cosine: float | None = None,
    vector_of: Callable[[str], np.ndarray] | None = None,
) -> list[EvidenceItem]:
    """Drop repeated texts, keeping the best-scored copy, then sort chronologically.

    With ``near_duplicate_cosine`` set, an item whose vector is at least that
    similar to an already kept item is dropped as well.
    """
    if near_duplicate_cosine is not None and vector_of is None:
        raise ValueError("near-duplicate filtering needs vector_of")
    kept: list[EvidenceItem] = []
    seen: set[str] = set()
    kept_vectors: list[np.ndarray] = []
    for item in sorted(items, key=lambda it: (-it.score, it.order_key())):
        norm = normalize_text(item.chunk.text)
        if norm in seen:
            continue
        if near_duplicate_cosine is not None:
            vec = vector_of(item.chunk.chunk_id)
            if any(float(np.dot(vec, v)) >= near_duplicate_cosine for v in kept_vectors):
                continue
            kept_vectors.append(vec)
        seen.add(norm)
        kept.append(item)
    return sorted(kept, key=EvidenceItem.order_key)


class QueryEncoder:
    """Embeds query strings once per provider and caches the vectors."""

    def __init__(self, provider: EmbeddingProvider):
        self.provider = provider
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, text: str) -> np.ndarray:
        vec = self._cache.get(text)
        if vec is None:
            vec = embed_texts(self.provider, [text])[0].values
            self._cache[text] = vec
        return vec

    def warm(self, texts: Sequence[str]) -> None:
        missing = sorted({t for t in texts if t not in self._cache})
        if missing:
            for text, vec in zip(missing, embed_texts(self.provider, missing)):
                self._cache[text] = vec.values


def retrieve_for_visit(
    index: VectorIndex,
    timeline: PatientTimeline,
    visit_index: int,
    encode: Callable[[str], np.ndarray],
    params: RetrievalParams = RetrievalParams(),
    queries: Sequence[RetrievalQuery] | None = None,
    local: Mapping[CanonicalNoteType, tuple[str, str]] | None = None,
) -> EvidenceBundle:
    if not 0 <= visit_index < len(timeline.visits):
        raise IndexError(f"visit_index {visit_index} outside timeline of {len(timeline.visits)} visits")
    visit = timeline.visits[visit_index]
    queries = list(queries) if queries is not None else default_queries(k=params.k_global)
    local = LOCAL_QUERIES if local is None else local
    window = timeline.visits[max(0, visit_index - params.recency_horizon):visit_index + 1]
    no_leak = frozenset({(visit.hadm_id, CanonicalNoteType.PROGRESS_NOTES)})

    plan: list[tuple[RetrievalQuery, MetadataFilter]] = []
    for q in queries:
        if q.mode is RetrievalMode.GLOBAL:
            flt = MetadataFilter(subject_id=visit.subject_id, hadm_ids=frozenset(v.hadm_id for v in window), exclude=no_leak)
        else:
            flt = MetadataFilter(
                subject_id=visit.subject_id,
                hadm_ids=frozenset({visit.hadm_id}),
                note_types=frozenset({q.target_note_type}),
                exclude=no_leak,
            )
        plan.append((q, flt))
    for t in visit.present_types():
        if t is CanonicalNoteType.PROGRESS_NOTES or t not in local:
            continue
        facet, text = local[t]
        q = RetrievalQuery(facet, text, RetrievalMode.LOCAL, t, params.k_local)
        flt = MetadataFilter(
            subject_id=visit.subject_id, hadm_ids=frozenset({visit.hadm_id}), note_types=frozenset({t}), exclude=no_leak
        )
        plan.append((q, flt))

    items = []
    for q, flt in plan:
        for chunk_id, cos in index.query_topk(encode(q.query_text), q.k, flt):
            chunk = index.chunk(chunk_id)
            bonus = SECTION_BONUS if q.soap_facet == "Objective" and chunk.metadata.section in OBJECTIVE_SECTIONS else 0.0
            items.append(EvidenceItem(chunk, q.soap_facet, cos, cos + bonus))
    ordered = dedup_and_order(items, params.near_duplicate_cosine, index.vector)
    return EvidenceBundle(visit.subject_id, visit.hadm_id, visit_index, ordered)


def write_bundles_jsonl(bundles: Iterable[EvidenceBundle], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for bundle in bundles:
            for row in bundle.dump_rows():
                fh.write(json.dumps(row, sort_keys=True))
                fh.write("\n")
