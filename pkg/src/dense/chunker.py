"""Header-scoped chunking with fixed-stride overlapping character windows."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from datetime import date, datetime
from typing import Iterable, Mapping, Sequence

from .preprocess import CleanNote
from .taxonomy import CanonicalNoteType

DEFAULT_WINDOW = 3000
DEFAULT_OVERLAP = 300


class ChunkError(ValueError):
    pass


@dataclass(frozen=True)
class ChunkMetadata:
    subject_id: int
    hadm_id: int
    chartdate: date | None
    note_type: CanonicalNoteType
    section: str
    section_index: int
    char_start: int
    char_end: int
    seq_index: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chartdate"] = None if self.chartdate is None else self.chartdate.isoformat()
        d["note_type"] = self.note_type.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ChunkMetadata:
        return cls(
            subject_id=d["subject_id"],
            hadm_id=d["hadm_id"],
            chartdate=None if d["chartdate"] is None else date.fromisoformat(d["chartdate"]),
            note_type=CanonicalNoteType(d["note_type"]),
            section=d["section"],
            section_index=d["section_index"],
            char_start=d["char_start"],
            char_end=d["char_end"],
            seq_index=d["seq_index"],
        )


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    text: str
    metadata: ChunkMetadata

    def to_dict(self) -> dict:
        return {"chunk_id": self.chunk_id, "text": self.text, "metadata": self.metadata.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> Chunk:
        return cls(d["chunk_id"], d["text"], ChunkMetadata.from_dict(d["metadata"]))


def make_chunk_id(
    subject_id: int, hadm_id: int, note_type: CanonicalNoteType, section_index: int, section: str, char_start: int
) -> str:
    # section_index keeps repeated headers (e.g. two concatenated reports) apart.
    key = f"{subject_id}|{hadm_id}|{note_type.value}|{section_index}|{section}|{char_start}"
    return hashlib.sha1(key.encode("utf-8")).hexdigest()


def window_spans(length: int, window_size: int = DEFAULT_WINDOW, overlap: int = DEFAULT_OVERLAP) -> list[tuple[int, int]]:
    """Half-open windows starting at multiples of ``window_size - overlap``.

    The last window is cut at ``length``.

    >>> window_spans(6000)
    [(0, 3000), (2700, 5700), (5400, 6000)]
    """
    if window_size < 1:
        raise ChunkError(f"window_size must be positive, got {window_size}")
    if not 0 <= overlap < window_size:
        raise ChunkError(f"overlap must satisfy 0 <= overlap < window_size, got {overlap} vs {window_size}")
    spans = []
    stride = window_size - overlap
    start = 0
    while start < length:
        end = min(start + window_size, length)
        spans.append((start, end))
        if end == length:
            break
        start += stride
    return spans


def chunk_note(
    note: CleanNote,
    window_size: int = DEFAULT_WINDOW,
    overlap: int = DEFAULT_OVERLAP,
    chartdate: date | None = None,
    seq_offset: int = 0,
) -> list[Chunk]:
    subject_id, hadm_id = note.provenance
    chunks = []
    seq = seq_offset
    for section_index, (section, body) in enumerate(note.sections):
        for start, end in window_spans(len(body), window_size, overlap):
            meta = ChunkMetadata(
                subject_id=subject_id,
                hadm_id=hadm_id,
                chartdate=chartdate,
                note_type=note.note_type,
                section=section,
                section_index=section_index,
                char_start=start,
                char_end=end,
                seq_index=seq,
            )
            cid = make_chunk_id(subject_id, hadm_id, note.note_type, section_index, section, start)
            chunks.append(Chunk(cid, body[start:end], meta))
            seq += 1
    return chunks


def order_visit_notes(
    notes: Iterable[CleanNote], first_charttimes: Mapping[CanonicalNoteType, datetime | None] | None = None
) -> list[CleanNote]:
    """Chronological note order within a visit: charttime when known, then type name."""
    first_charttimes = first_charttimes or {}

    def key(note: CleanNote):
        ts = first_charttimes.get(note.note_type)
        return (ts is None, ts or datetime.min, note.note_type.value)

    return sorted(notes, key=key)


def chunk_visit(
    notes: Iterable[CleanNote],
    chartdate: date | None,
    first_charttimes: Mapping[CanonicalNoteType, datetime | None] | None = None,
    window_size: int = DEFAULT_WINDOW,
    overlap: int = DEFAULT_OVERLAP,
) -> list[Chunk]:
    """Chunk every note of one visit with a visit-wide ``seq_index``."""
    chunks: list[Chunk] = []
    for note in order_visit_notes(notes, first_charttimes):
        chunks.extend(chunk_note(note, window_size, overlap, chartdate, seq_offset=len(chunks)))
    return chunks


def reconstruct_section(chunks: Sequence[Chunk]) -> str:
    """Inverse of windowing for the chunks of one section, sorted by ``char_start``."""
    if not chunks:
        return ""
    first = chunks[0].metadata
    ident = (first.subject_id, first.hadm_id, first.note_type, first.section_index)
    if first.char_start != 0:
        raise ChunkError(f"gap: first chunk starts at {first.char_start}")
    text = chunks[0].text
    prev_start = first.char_start
    for chunk in chunks[1:]:
        m = chunk.metadata
        if (m.subject_id, m.hadm_id, m.note_type, m.section_index) != ident:
            raise ChunkError(f"chunk {chunk.chunk_id} belongs to a different section")
        if m.char_start < prev_start:
            raise ChunkError("chunks are not sorted by char_start")
        if m.char_end - m.char_start != len(chunk.text):
            raise ChunkError(f"chunk {chunk.chunk_id} offsets disagree with its text length")
        end = len(text)
        if m.char_start > end:
            raise ChunkError(f"gap of {m.char_start - end} chars before offset {m.char_start}")
        shared = min(end - m.char_start, len(chunk.text))
        if chunk.text[:shared] != text[m.char_start:m.char_start + shared]:
            raise ChunkError(f"inconsistent overlap at offset {m.char_start}")
        text += chunk.text[shared:]
        prev_start = m.char_start
    return text
