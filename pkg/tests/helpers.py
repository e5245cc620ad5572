"""Small builders shared by the test modules."""

from __future__ import annotations

from datetime import date

import numpy as np

from dense.chunker import Chunk, ChunkMetadata, make_chunk_id
from dense.taxonomy import CanonicalNoteType, RawNoteRecord


def make_record(row_id, subject_id=1, hadm_id=100, chartdate=date(2131, 1, 1), charttime=None,
                category="Radiology", description="Report", text="x"):
    return RawNoteRecord(row_id, subject_id, hadm_id, chartdate, charttime, category, description, text)


def make_chunk(text, subject_id=1, hadm_id=100, note_type=CanonicalNoteType.RADIOLOGY_REPORTS,
               section="Findings", chartdate=date(2131, 1, 1), seq_index=0, section_index=0, char_start=0):
    meta = ChunkMetadata(subject_id, hadm_id, chartdate, note_type, section, section_index,
                         char_start, char_start + len(text), seq_index)
    cid = make_chunk_id(subject_id, hadm_id, note_type, section_index, section, char_start)
    return Chunk(cid, text, meta)


def unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)

