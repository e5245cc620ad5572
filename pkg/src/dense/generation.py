"""Prompt construction, text-generation providers and SOAP parsing."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import date
from enum import Enum
from pathlib import Path
from typing import Callable, NamedTuple, Protocol, Sequence

import httpx
import numpy as np

from .corpus import PatientTimeline
from .index import VectorIndex
from .providers import (
    DEFAULT_ATTEMPTS,
    DEFAULT_BASE_DELAY,
    ProviderError,
    TransportError,
    auth_headers,
    call_with_retries,
    post_json,
)
from .retrieval import FACETS, EvidenceBundle, RetrievalParams, RetrievalQuery, retrieve_for_visit

logger = logging.getLogger(__name__)

INSTRUCTIONS = (
    "Write a clinical progress note for the current hospital visit using only the evidence below. "
    "Use exactly four sections headed 'Subjective:', 'Objective:', 'Assessment:' and 'Plan:'. "
    "Do not invent findings that the evidence does not support."
)
PRIOR_HEADER = "Prior visit summary:"
EVIDENCE_HEADER = "Evidence:"
NO_PRIOR_CONTENT = "No prior note content available."
SUMMARY_CAP = 800
DEFAULT_MAX_PROMPT_CHARS = 24000


class PromptMode(str, Enum):
    ENRICHMENT = "enrichment"
    TEMPORAL = "temporal"


class PromptContractError(ValueError):
    """The enrichment/temporal contract or the length budget was violated."""


class GenerationError(RuntimeError):
    def __init__(self, subject_id: int, hadm_id: int, message: str):
        super().__init__(f"visit ({subject_id}, {hadm_id}): {message}")
        self.subject_id = subject_id
        self.hadm_id = hadm_id


@dataclass(frozen=True)
class EvidenceBlock:
    chunk_id: str
    note_type: str
    chartdate: date | None
    section: str
    facet: str
    score: float
    text: str

    def tag(self) -> str:
        when = self.chartdate.isoformat() if self.chartdate else "unknown date"
        return f"[{self.note_type} | {when} | {self.section}]"

    def render(self) -> str:
        return f"{self.tag()}\n{self.text}"


@dataclass(frozen=True)
class PromptSpec:
    mode: PromptMode
    subject_id: int
    hadm_id: int
    visit_index: int
    evidence: tuple[EvidenceBlock, ...]
    previous_summary: str | None = None
    instructions: str = INSTRUCTIONS
    dropped: tuple[str, ...] = ()

    def __post_init__(self):
        temporal = self.mode is PromptMode.TEMPORAL
        if temporal != (self.visit_index > 0) or temporal != (self.previous_summary is not None):
            raise PromptContractError(
                f"mode {self.mode.value} with visit_index {self.visit_index} and "
                f"{'a' if self.previous_summary is not None else 'no'} previous summary"
            )

    def render(self) -> str:
        parts = [self.instructions]
        if self.previous_summary is not None:
            parts.append(f"{PRIOR_HEADER}\n{self.previous_summary}")
        parts.append(EVIDENCE_HEADER)
        parts.extend(block.render() for block in self.evidence)
        return "\n\n".join(parts)

    def digest(self) -> str:
        return hashlib.sha256(self.render().encode("utf-8")).hexdigest()


def _drop_order(block: EvidenceBlock) -> tuple:
    return (block.score, block.chartdate or date.min, block.chunk_id)


def build_prompt(
    bundle: EvidenceBundle,
    previous_summary: str | None,
    visit_index: int,
    max_chars: int = DEFAULT_MAX_PROMPT_CHARS,
) -> PromptSpec:
    """Assemble the prompt, dropping the weakest evidence until it fits ``max_chars``."""
    if visit_index > 0 and previous_summary is None:
        raise PromptContractError(f"visit {visit_index} needs the previous note's summary")
    if visit_index == 0 and previous_summary is not None:
        raise PromptContractError("the first visit is prompted without a prior summary")
    mode = PromptMode.TEMPORAL if visit_index > 0 else PromptMode.ENRICHMENT
    blocks = [
        EvidenceBlock(
            chunk_id=item.chunk.chunk_id,
            note_type=item.chunk.metadata.note_type.value,
            chartdate=item.chunk.metadata.chartdate,
            section=item.chunk.metadata.section,
            facet=item.facet,
            score=item.score,
            text=item.chunk.text,
        )
        for item in bundle.items
    ]

    def make(kept: list[EvidenceBlock], dropped: list[str]) -> PromptSpec:
        return PromptSpec(mode, bundle.subject_id, bundle.hadm_id, visit_index, tuple(kept), previous_summary, INSTRUCTIONS, tuple(dropped))

    spec = make(blocks, [])
    length = len(spec.render())
    if length <= max_chars:
        return spec
    # Each dropped block saves its rendered text plus one separator.
    kept_ids = {b.chunk_id for b in blocks}
    dropped: list[str] = []
    for block in sorted(blocks, key=_drop_order):
        if length <= max_chars:
            break
        kept_ids.discard(block.chunk_id)
        dropped.append(block.chunk_id)
        length -= len(block.render()) + 2
    spec = make([b for b in blocks if b.chunk_id in kept_ids], dropped)
    if len(spec.render()) > max_chars:
        raise PromptContractError(f"prompt needs {len(spec.render())} chars without evidence; budget is {max_chars}")
    return spec


class GenerationProvider(Protocol):
    provider_id: str
    max_prompt_chars: int
    deterministic: bool

    def generate(self, prompt: PromptSpec) -> str: ...


_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.!?])\s+")


def split_sentences(text: str) -> list[str]:
    flat = " ".join(text.split())
    return [s for s in _SENTENCE_SPLIT_RE.split(flat) if s] if flat else []


MOCK_FALLBACK = {
    "Subjective": "No new complaints documented in the available evidence.",
    "Objective": "No objective findings documented in the available evidence.",
    "Assessment": "Clinical status unchanged based on available documentation.",
    "Plan": "Continue current management and monitor clinical status.",
}


class MockProvider:
    """Deterministic offline generator that templates a SOAP note from facet-tagged evidence."""

    deterministic = True

    def __init__(self, max_prompt_chars: int = DEFAULT_MAX_PROMPT_CHARS, sentences_per_block: int = 1, blocks_per_facet: int = 2):
        self.max_prompt_chars = max_prompt_chars
        self.sentences_per_block = sentences_per_block
        self.blocks_per_facet = blocks_per_facet
        self.provider_id = f"mock-soap-{sentences_per_block}x{blocks_per_facet}"
        self.calls = 0

    def generate(self, prompt: PromptSpec) -> str:
        self.calls += 1
        sections = []
        for facet in FACETS:
            picked: list[str] = []
            for block in (b for b in prompt.evidence if b.facet == facet):
                sents = split_sentences(block.text)[: self.sentences_per_block]
                if sents:
                    picked.append(" ".join(sents))
                if len(picked) >= self.blocks_per_facet:
                    break
            if facet == "Assessment" and prompt.previous_summary and prompt.previous_summary != NO_PRIOR_CONTENT:
                prior = split_sentences(prompt.previous_summary)[:1]
                picked.extend(f"Previously: {s}" for s in prior)
            body = " ".join(picked) or MOCK_FALLBACK[facet]
            sections.append(f"{facet}:\n{body}")
        return "\n\n".join(sections)


class RemoteGenerator:
    """Client for ``POST {base_url}/generate`` returning ``{"text": ...}``."""

    deterministic = False

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        max_tokens: int = 1024,
        temperature: float = 0.0,
        max_prompt_chars: int = DEFAULT_MAX_PROMPT_CHARS,
        timeout: float = 120.0,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.max_prompt_chars = max_prompt_chars
        self.provider_id = f"remote-generate@{self.base_url}:t{temperature}:m{max_tokens}"
        self._headers = auth_headers(api_key)
        self._client = client or httpx.Client(timeout=timeout)

    def generate(self, prompt: PromptSpec) -> str:
        payload = {"prompt": prompt.render(), "max_tokens": self.max_tokens, "temperature": self.temperature}
        body = post_json(self._client, f"{self.base_url}/generate", payload, self._headers)
        text = body.get("text")
        if not isinstance(text, str):
            raise TransportError("generate response has no 'text' string")
        return text


class ResponseCache:
    """Content-addressed on-disk store of provider responses.

    Reads need no lock; writes go through a temp file and an atomic rename.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._write_lock = threading.Lock()

    @staticmethod
    def key(provider_id: str, prompt_digest: str) -> str:
        return hashlib.sha256(f"{provider_id}\n{prompt_digest}".encode("utf-8")).hexdigest()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, provider_id: str, prompt_digest: str) -> str | None:
        path = self._path(self.key(provider_id, prompt_digest))
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        return entry["text"]

    def put(self, provider_id: str, prompt_digest: str, text: str) -> None:
        path = self._path(self.key(provider_id, prompt_digest))
        payload = json.dumps({"provider_id": provider_id, "prompt_digest": prompt_digest, "text": text}, sort_keys=True)
        with self._write_lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(payload)
            os.replace(tmp, path)


class ParsedSoap(NamedTuple):
    subjective: str
    objective: str
    assessment: str
    plan: str
    warnings: list[str]


_HEADER_WORDS = {"subjective": 0, "s": 0, "objective": 1, "o": 1, "assessment": 2, "a": 2, "plan": 3, "p": 3}
_SOAP_HEADER_RE = re.compile(
    r"^[\s#*_>]*(subjective|objective|assessment|plan|s|o|a|p)[\s*_]*(:)?[\s*_]*(.*)$",
    re.IGNORECASE,
)


def _soap_header(line: str) -> tuple[int, str] | None:
    m = _SOAP_HEADER_RE.match(line)
    if m is None:
        return None
    word, colon, rest = m.group(1).lower(), m.group(2), m.group(3)
    if colon:
        return _HEADER_WORDS[word], rest.strip()
    # Without a colon only a bare full-word header line counts.
    if len(word) > 1 and not rest.strip():
        return _HEADER_WORDS[word], ""
    return None


def parse_soap(text: str) -> ParsedSoap:
    """Split provider output on line-initial SOAP headers; never raises."""
    bodies: list[list[str]] = [[], [], [], []]
    preamble: list[str] = []
    current: int | None = None
    for line in text.replace("\r\n", "\n").split("\n"):
        hit = _soap_header(line)
        if hit is not None:
            current = hit[0]
            if hit[1]:
                bodies[current].append(hit[1])
            continue
        (preamble if current is None else bodies[current]).append(line)
    warnings = []
    leftover = "\n".join(preamble).strip()
    if leftover:
        warnings.append(f"discarded {len(leftover)} chars before the first SOAP header")
    sections = ["\n".join(b).strip() for b in bodies]
    if current is None:
        warnings.append("no SOAP headers found")
    else:
        warnings.extend(f"missing {name}" for name, body in zip(FACETS, sections) if not body)
    return ParsedSoap(*sections, warnings)


@dataclass
class GeneratedNote:
    subject_id: int
    hadm_id: int
    visit_index: int
    subjective: str
    objective: str
    assessment: str
    plan: str
    raw_output: str
    prompt_lineage: dict
    provider_id: str
    warnings: list[str] = field(default_factory=list)

    @property
    def key(self) -> tuple[int, int]:
        return (self.subject_id, self.hadm_id)

    @property
    def parse_warning(self) -> bool:
        return bool(self.warnings)

    def sections(self) -> dict[str, str]:
        return dict(zip(FACETS, (self.subjective, self.objective, self.assessment, self.plan)))

    def render(self) -> str:
        return "\n\n".join(f"{name}:\n{body}" for name, body in self.sections().items() if body)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> GeneratedNote:
        return cls(**d)


def generate_note(
    provider: GenerationProvider,
    prompt: PromptSpec,
    cache: ResponseCache | None = None,
    lineage: dict | None = None,
    attempts: int = DEFAULT_ATTEMPTS,
    base_delay: float = DEFAULT_BASE_DELAY,
    sleep: Callable[[float], None] = time.sleep,
) -> GeneratedNote:
    rendered = prompt.render()
    if len(rendered) > provider.max_prompt_chars:
        raise PromptContractError(f"prompt of {len(rendered)} chars exceeds {provider.provider_id} budget {provider.max_prompt_chars}")
    digest = prompt.digest()
    text = cache.get(provider.provider_id, digest) if cache is not None else None
    if text is None:
        try:
            text = call_with_retries(
                lambda: provider.generate(prompt),
                attempts=attempts,
                base_delay=base_delay,
                sleep=sleep,
                what=f"generate via {provider.provider_id}",
            )
        except ProviderError as exc:
            raise GenerationError(prompt.subject_id, prompt.hadm_id, str(exc)) from exc
        if cache is not None:
            cache.put(provider.provider_id, digest, text)
    parsed = parse_soap(text)
    full_lineage = {"prompt_digest": digest, "mode": prompt.mode.value, "summary_digest": None, "summary_source_visit": None}
    full_lineage.update(lineage or {})
    return GeneratedNote(
        subject_id=prompt.subject_id,
        hadm_id=prompt.hadm_id,
        visit_index=prompt.visit_index,
        subjective=parsed.subjective,
        objective=parsed.objective,
        assessment=parsed.assessment,
        plan=parsed.plan,
        raw_output=text,
        prompt_lineage=full_lineage,
        provider_id=provider.provider_id,
        warnings=parsed.warnings,
    )


_CUE_RE = re.compile(r"\bfollow[\s-]?ups?\b|\bcontinu\w*|\bmonitor\w*", re.IGNORECASE)


def summarize_previous_note(note: GeneratedNote) -> str:
    """Extractive carry-over summary of a note's Assessment and Plan."""
    assessment = split_sentences(note.assessment)
    plan = split_sentences(note.plan)
    if not assessment and not plan:
        return NO_PRIOR_CONTENT
    picked = assessment[:2] + plan[:2] + [s for s in plan[2:] if _CUE_RE.search(s)]
    out: list[str] = []
    length = 0
    for sentence in picked:
        extra = len(sentence) + (1 if out else 0)
        if length + extra > SUMMARY_CAP:
            break
        out.append(sentence)
        length += extra
    if not out:
        return picked[0][:SUMMARY_CAP]
    return " ".join(out)


def summary_digest(summary: str) -> str:
    return hashlib.sha256(summary.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class VisitFailure:
    subject_id: int
    hadm_id: int
    visit_index: int
    error: str


@dataclass
class PatientRun:
    subject_id: int
    notes: list[GeneratedNote]
    failures: list[VisitFailure]
    bundles: list[EvidenceBundle] = field(default_factory=list)


def run_patient(
    provider: GenerationProvider,
    index: VectorIndex,
    timeline: PatientTimeline,
    encode: Callable[[str], np.ndarray],
    params: RetrievalParams = RetrievalParams(),
    queries: Sequence[RetrievalQuery] | None = None,
    cache: ResponseCache | None = None,
    keep_bundles: bool = False,
    sleep: Callable[[float], None] = time.sleep,
) -> PatientRun:
    """Generate every visit in order, each temporal prompt carrying the previous note's summary.

    A failed visit is recorded; later visits summarize the last successful note.
    """
    notes: list[GeneratedNote] = []
    failures: list[VisitFailure] = []
    bundles: list[EvidenceBundle] = []
    last_ok: GeneratedNote | None = None
    for i, visit in enumerate(timeline.visits):
        bundle = retrieve_for_visit(index, timeline, i, encode, params, queries)
        if keep_bundles:
            bundles.append(bundle)
        lineage: dict = {}
        summary = None
        if i > 0:
            summary = summarize_previous_note(last_ok) if last_ok is not None else NO_PRIOR_CONTENT
            lineage = {
                "summary_digest": summary_digest(summary),
                "summary_source_visit": None if last_ok is None else last_ok.visit_index,
            }
        try:
            prompt = build_prompt(bundle, summary, i, provider.max_prompt_chars)
            note = generate_note(provider, prompt, cache, lineage, sleep=sleep)
        except (GenerationError, PromptContractError) as exc:
            logger.warning("generation failed for subject %s visit %d: %s", visit.subject_id, i, exc)
            failures.append(VisitFailure(visit.subject_id, visit.hadm_id, i, str(exc)))
            continue
        notes.append(note)
        last_ok = note
    return PatientRun(timeline.subject_id, notes, failures, bundles)
