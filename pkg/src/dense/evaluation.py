"""Lexical, semantic, structural, length and longitudinal scoring of generated notes."""

from __future__ import annotations

import csv
import io
import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .embedding import EmbeddingProvider, cosine, embed_texts
from .generation import GeneratedNote

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)
Tokens = Sequence[str]


class UndefinedRatioError(ValueError):
    """The gold side of a length ratio has no tokens."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters.

    >>> tokenize("BP 120/80")
    ['bp', '120', '80']
    """
    return _TOKEN_RE.findall(text.lower())


def _tokens(x: str | Tokens) -> list[str]:
    return tokenize(x) if isinstance(x, str) else list(x)


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: str | Tokens, reference: str | Tokens, max_n: int = 4) -> float:
    """Sentence BLEU, uniform weights, brevity penalty.

    Orders above 1 with no clipped match use add-one smoothing
    ``1 / (total + 1)``. Unigrams are not smoothed, so disjoint texts score 0.
    """
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        cand_counts = ngrams(cand, n)
        ref_counts = ngrams(ref, n)
        total = max(len(cand) - n + 1, 0)
        matched = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        if matched == 0:
            if n == 1:
                return 0.0
            p = 1.0 / (total + 1)
        else:
            p = matched / total
        log_sum += math.log(p)
    bp = 1.0 if len(cand) > len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return bp * math.exp(log_sum / max_n)


def _f1(overlap: int, n_cand: int, n_ref: int) -> float:
    # Harmonic mean of overlap/n_cand and overlap/n_ref.
    return 0.0 if overlap == 0 else 2.0 * overlap / (n_cand + n_ref)


def rouge_n(candidate: str | Tokens, reference: str | Tokens, n: int = 1) -> float:
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    c, r = ngrams(cand, n), ngrams(ref, n)
    if not c and not r:
        return 1.0 if cand == ref else 0.0
    overlap = sum((c & r).values())
    return _f1(overlap, sum(c.values()), sum(r.values()))


def lcs_length(a: Tokens, b: Tokens) -> int:
    """Token-level LCS length via bit-parallel row updates."""
    if not a or not b:
        return 0
    masks: dict[str, int] = {}
    for i, tok in enumerate(a):
        masks[tok] = masks.get(tok, 0) | (1 << i)
    full = (1 << len(a)) - 1
    v = full
    for tok in b:
        u = v & masks.get(tok, 0)
        v = ((v + u) | (v - u)) & full
    return len(a) - bin(v).count("1")


def rouge_l(candidate: str | Tokens, reference: str | Tokens) -> float:
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    return _f1(lcs_length(cand, ref), len(cand), len(ref))


class TextEmbeddings:
    """Embeds each distinct text once; identical texts share one vector."""

    def __init__(self, provider: EmbeddingProvider, max_workers: int = 1):
        self.provider = provider
        self.max_workers = max_workers
        self._vectors: dict[str, np.ndarray] = {}

    def prefetch(self, texts: Sequence[str]) -> None:
        missing = sorted({t for t in texts if t and t not in self._vectors})
        if missing:
            vecs = embed_texts(self.provider, missing, max_workers=self.max_workers)
            for text, vec in zip(missing, vecs):
                self._vectors[text] = vec.values

    def vector(self, text: str) -> np.ndarray:
        if not text:
            return np.zeros(self.provider.dimension)
        if text not in self._vectors:
            self.prefetch([text])
        return self._vectors[text]


def semantic_similarity(embeddings: TextEmbeddings | EmbeddingProvider, generated: str, gold: str) -> float:
    """Whole-note cosine; 0.0 when either side is empty."""
    if not isinstance(embeddings, TextEmbeddings):
        embeddings = TextEmbeddings(embeddings)
    if not generated or not gold:
        return 0.0
    return cosine(embeddings.vector(generated), embeddings.vector(gold))


def soap_completeness(note: GeneratedNote) -> int:
    return sum(1 for body in (note.subjective, note.objective, note.assessment, note.plan) if body.strip())


def length_ratio(generated: str | Tokens, gold: str | Tokens) -> float:
    g, r = _tokens(generated), _tokens(gold)
    if not r:
        raise UndefinedRatioError("gold note has no tokens")
    return len(g) / len(r)


@dataclass
class NotePairScores:
    subject_id: int
    hadm_id: int
    visit_index: int
    bleu: float
    rouge1: float
    rouge2: float
    rougeL: float
    semantic_similarity: float
    soap_score: int
    length_ratio: float | None
    excluded_reason: str = ""


def score_pair(embeddings: TextEmbeddings, note: GeneratedNote, gold_text: str) -> NotePairScores:
    generated_text = note.render()
    cand, ref = tokenize(generated_text), tokenize(gold_text)
    try:
        ratio: float | None = length_ratio(cand, ref)
        reason = ""
    except UndefinedRatioError as exc:
        ratio, reason = None, str(exc)
    return NotePairScores(
        subject_id=note.subject_id,
        hadm_id=note.hadm_id,
        visit_index=note.visit_index,
        bleu=bleu(cand, ref),
        rouge1=rouge_n(cand, ref, 1),
        rouge2=rouge_n(cand, ref, 2),
        rougeL=rouge_l(cand, ref),
        semantic_similarity=semantic_similarity(embeddings, generated_text, gold_text),
        soap_score=soap_completeness(note),
        length_ratio=ratio,
        excluded_reason=reason,
    )


def _mean(values: Sequence[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


@dataclass
class PatientTemporal:
    subject_id: int
    n_visits: int
    consistency_generated: float
    consistency_gold: float
    alignment_ratio: float | None


@dataclass
class TemporalReport:
    patients: list[PatientTemporal]
    excluded: list[tuple[int, str]]
    mean_consistency_generated: float | None
    mean_consistency_gold: float | None
    mean_alignment_ratio: float | None
    undefined_ratios: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["excluded"] = [{"subject_id": s, "reason": r} for s, r in self.excluded]
        return d


def adjacent_consistency(vectors: Sequence[np.ndarray]) -> float:
    """Mean cosine of each note with the next one."""
    return math.fsum(cosine(a, b) for a, b in zip(vectors, vectors[1:])) / (len(vectors) - 1)


def temporal_alignment(
    embeddings: TextEmbeddings | EmbeddingProvider,
    generated: Mapping[int, Sequence[str]],
    gold: Mapping[int, Sequence[str]],
) -> TemporalReport:
    """Per-patient adjacent-visit consistency of generated and gold notes and their ratio."""
    if not isinstance(embeddings, TextEmbeddings):
        embeddings = TextEmbeddings(embeddings)
    subjects = sorted(set(generated) | set(gold))
    embeddings.prefetch([t for s in subjects for seq in (generated.get(s, ()), gold.get(s, ())) for t in seq])
    patients, excluded = [], []
    undefined = 0
    for sid in subjects:
        gen_seq, gold_seq = list(generated.get(sid, ())), list(gold.get(sid, ()))
        if len(gen_seq) < 2 or len(gold_seq) < 2:
            excluded.append((sid, f"fewer than 2 visits (generated {len(gen_seq)}, gold {len(gold_seq)})"))
            continue
        c_gen = adjacent_consistency([embeddings.vector(t) for t in gen_seq])
        c_gold = adjacent_consistency([embeddings.vector(t) for t in gold_seq])
        ratio = c_gen / c_gold if c_gold > 0 else None
        undefined += ratio is None
        patients.append(PatientTemporal(sid, len(gen_seq), c_gen, c_gold, ratio))
    return TemporalReport(
        patients=patients,
        excluded=excluded,
        mean_consistency_generated=_mean([p.consistency_generated for p in patients]),
        mean_consistency_gold=_mean([p.consistency_gold for p in patients]),
        mean_alignment_ratio=_mean([p.alignment_ratio for p in patients if p.alignment_ratio is not None]),
        undefined_ratios=undefined,
    )


PAIR_METRICS = ("bleu", "rouge1", "rouge2", "rougeL", "semantic_similarity", "soap_score", "length_ratio")

_TABLE_ROWS = (
    ("BLEU", "bleu"),
    ("ROUGE-1", "rouge1"),
    ("ROUGE-2", "rouge2"),
    ("ROUGE-L", "rougeL"),
    ("Semantic Similarity", "semantic_similarity"),
    ("SOAP Structure Score", "soap_score"),
    ("Length Ratio", "length_ratio"),
    ("Temporal Consistency (Gold)", "temporal_consistency_gold"),
    ("Temporal Consistency (Generated)", "temporal_consistency_generated"),
    ("Alignment Ratio (Gen/Gold)", "alignment_ratio"),
)


@dataclass
class CohortReport:
    n_pairs: int
    means: dict[str, float | None]
    length_ratio_excluded: int
    temporal: TemporalReport
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "means": dict(self.means),
            "length_ratio_excluded": self.length_ratio_excluded,
            "temporal": self.temporal.to_dict(),
            **({"extra": self.extra} if self.extra else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table_values(self) -> dict[str, float | None]:
        values = dict(self.means)
        values["temporal_consistency_gold"] = self.temporal.mean_consistency_gold
        values["temporal_consistency_generated"] = self.temporal.mean_consistency_generated
        values["alignment_ratio"] = self.temporal.mean_alignment_ratio
        return values

    def to_table(self) -> str:
        values = self.table_values()
        width = max(len(label) for label, _ in _TABLE_ROWS)
        lines = [f"{'Metric'.ljust(width)}  Mean Score", f"{'-' * width}  ----------"]
        for label, key in _TABLE_ROWS:
            v = values.get(key)
            if v is None:
                shown = "n/a"
            elif key == "soap_score":
                shown = f"{v:.1f} / 4.0"
            else:
                shown = f"{v:.4f}"
            lines.append(f"{label.ljust(width)}  {shown}")
        lines.append("")
        lines.append(
            f"pairs scored: {self.n_pairs}; length ratio excluded: {self.length_ratio_excluded}; "
            f"patients in temporal analysis: {len(self.temporal.patients)}; excluded: {len(self.temporal.excluded)}"
        )
        return "\n".join(lines) + "\n"


def aggregate_report(pairs: Sequence[NotePairScores], temporal: TemporalReport) -> CohortReport:
    """Unweighted per-metric means across scored visit pairs plus cohort temporal values."""
    if not pairs:
        raise ValueError("aggregate_report needs at least one scored pair")
    means: dict[str, float | None] = {}
    for metric in PAIR_METRICS:
        values = [getattr(p, metric) for p in pairs if getattr(p, metric) is not None]
        means[metric] = _mean(values)
    excluded = sum(1 for p in pairs if p.length_ratio is None)
    return CohortReport(len(pairs), means, excluded, temporal)


def pairs_to_csv(pairs: Sequence[NotePairScores]) -> str:
    buf = io.StringIO()
    names = list(NotePairScores.__dataclass_fields__)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(names)
    for p in pairs:
        writer.writerow(["" if getattr(p, n) is None else getattr(p, n) for n in names])
    return buf.getvalue()
