"""In-process exact vector index with metadata filtering and JSONL persistence."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .chunker import Chunk, ChunkMetadata
from .embedding import EmbeddingVector
from .providers import DimensionMismatchError
from .taxonomy import CanonicalNoteType

FORMAT_VERSION = 1


class IndexConflictError(ValueError):
    """A chunk id was re-added with a different vector."""


@dataclass(frozen=True)
class MetadataFilter:
    subject_id: int | None = None
    hadm_ids: frozenset[int] | None = None
    note_types: frozenset[CanonicalNoteType] | None = None
    sections: frozenset[str] | None = None
    date_from: date | None = None
    date_to: date | None = None
    # (hadm_id, note_type) pairs that must never be returned.
    exclude: frozenset[tuple[int, CanonicalNoteType]] | None = None
    predicate: Callable[[ChunkMetadata], bool] | None = None

    def matches(self, meta: ChunkMetadata) -> bool:
        if self.subject_id is not None and meta.subject_id != self.subject_id:
            return False
        if self.hadm_ids is not None and meta.hadm_id not in self.hadm_ids:
            return False
        if self.note_types is not None and meta.note_type not in self.note_types:
            return False
        if self.sections is not None and meta.section not in self.sections:
            return False
        if self.date_from is not None and (meta.chartdate is None or meta.chartdate < self.date_from):
            return False
        if self.date_to is not None and (meta.chartdate is None or meta.chartdate > self.date_to):
            return False
        if self.exclude and (meta.hadm_id, meta.note_type) in self.exclude:
            return False
        return self.predicate is None or bool(self.predicate(meta))


def row_scores(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Per-row dot products; identical rows always get bit-identical scores."""
    return np.clip((matrix * query).sum(axis=1), -1.0, 1.0)


class VectorIndex:
    """Exact cosine search over L2-normalized vectors.

    Many concurrent readers are fine; ``add`` takes an exclusive lock.
    """

    def __init__(self, dimension: int, provider_id: str):
        self.dimension = dimension
        self.provider_id = provider_id
        self._ids: list[str] = []
        self._pos: dict[str, int] = {}
        self._chunks: list[Chunk] = []
        self._rows: list[np.ndarray] = []
        self._lock = threading.Lock()
        self._cache: dict | None = None

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, chunk_id: str) -> bool:
        return chunk_id in self._pos

    def chunk(self, chunk_id: str) -> Chunk:
        return self._chunks[self._pos[chunk_id]]

    def vector(self, chunk_id: str) -> np.ndarray:
        return self._rows[self._pos[chunk_id]]

    def chunks(self) -> list[Chunk]:
        return list(self._chunks)

    def add(self, chunks: Sequence[Chunk], vectors: Sequence[EmbeddingVector | np.ndarray]) -> VectorIndex:
        if len(chunks) != len(vectors):
            raise ValueError(f"{len(chunks)} chunks but {len(vectors)} vectors")
        prepared = []
        for chunk, vec in zip(chunks, vectors):
            if isinstance(vec, EmbeddingVector):
                if vec.provider_id != self.provider_id:
                    raise ValueError(f"vector from {vec.provider_id!r} cannot join an index of {self.provider_id!r}")
                values = vec.values
            else:
                values = np.asarray(vec, dtype=np.float64)
            if values.shape != (self.dimension,):
                raise DimensionMismatchError(f"vector shape {values.shape} does not match index dimension {self.dimension}")
            prepared.append((chunk, np.asarray(values, dtype=np.float64)))
        with self._lock:
            for chunk, values in prepared:
                pos = self._pos.get(chunk.chunk_id)
                if pos is not None:
                    if not np.array_equal(self._rows[pos], values):
                        raise IndexConflictError(f"chunk {chunk.chunk_id} already indexed with a different vector")
                    continue
                self._pos[chunk.chunk_id] = len(self._ids)
                self._ids.append(chunk.chunk_id)
                self._chunks.append(chunk)
                self._rows.append(values)
            self._cache = None
        return self

    def _columns(self) -> dict:
        cache = self._cache
        if cache is None:
            metas = [c.metadata for c in self._chunks]
            by_subject: dict[int, list[int]] = {}
            for i, m in enumerate(metas):
                by_subject.setdefault(m.subject_id, []).append(i)
            cache = {
                "matrix": np.vstack(self._rows) if self._rows else np.zeros((0, self.dimension)),
                "ids": np.array(self._ids, dtype=object),
                "hadm": np.array([m.hadm_id for m in metas], dtype=np.int64),
                "note_type": np.array([m.note_type.value for m in metas], dtype=object),
                "section": np.array([m.section for m in metas], dtype=object),
                "date": np.array([m.chartdate.toordinal() if m.chartdate else -1 for m in metas], dtype=np.int64),
                "by_subject": {k: np.array(v, dtype=np.int64) for k, v in by_subject.items()},
            }
            self._cache = cache
        return cache

    def _candidates(self, flt: MetadataFilter | None, cols: dict) -> np.ndarray:
        if flt is None:
            return np.arange(len(self._ids), dtype=np.int64)
        if flt.subject_id is not None:
            rows = cols["by_subject"].get(flt.subject_id, np.zeros(0, dtype=np.int64))
        else:
            rows = np.arange(len(self._ids), dtype=np.int64)
        mask = np.ones(len(rows), dtype=bool)
        if flt.hadm_ids is not None:
            mask &= np.isin(cols["hadm"][rows], np.fromiter(flt.hadm_ids, dtype=np.int64))
        if flt.note_types is not None:
            mask &= np.isin(cols["note_type"][rows], [t.value for t in flt.note_types])
        if flt.sections is not None:
            mask &= np.isin(cols["section"][rows], list(flt.sections))
        if flt.date_from is not None:
            mask &= (cols["date"][rows] >= flt.date_from.toordinal()) & (cols["date"][rows] >= 0)
        if flt.date_to is not None:
            mask &= (cols["date"][rows] <= flt.date_to.toordinal()) & (cols["date"][rows] >= 0)
        if flt.exclude:
            for hadm, note_type in flt.exclude:
                mask &= ~((cols["hadm"][rows] == hadm) & (cols["note_type"][rows] == note_type.value))
        rows = rows[mask]
        if flt.predicate is not None:
            rows = np.array([r for r in rows if flt.predicate(self._chunks[r].metadata)], dtype=np.int64)
        return rows

    def query_topk(
        self, query: EmbeddingVector | np.ndarray, k: int, flt: MetadataFilter | None = None
    ) -> list[tuple[str, float]]:
        """Top ``k`` entries passing ``flt`` by descending cosine, ties by ascending chunk id."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        q = query.values if isinstance(query, EmbeddingVector) else np.asarray(query, dtype=np.float64)
        if q.shape != (self.dimension,):
            raise DimensionMismatchError(f"query shape {q.shape} does not match index dimension {self.dimension}")
        norm = float(np.linalg.norm(q))
        if norm > 0:
            q = q / norm
        cols = self._columns()
        rows = self._candidates(flt, cols)
        if len(rows) == 0:
            return []
        scores = row_scores(cols["matrix"][rows], q)
        if len(rows) > k:
            # Keep everything tied with the k-th best so the id tie-break stays exact.
            threshold = -np.partition(-scores, k - 1)[k - 1]
            keep = scores >= threshold
            rows, scores = rows[keep], scores[keep]
        ids = cols["ids"][rows]
        ranked = sorted(zip(ids.tolist(), scores.tolist()), key=lambda p: (-p[1], p[0]))
        return ranked[:k]

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "entries.jsonl", "w", encoding="utf-8") as fh:
            for chunk, row in zip(self._chunks, self._rows):
                entry = chunk.to_dict()
                entry["vector"] = row.tolist()
                fh.write(json.dumps(entry, sort_keys=True))
                fh.write("\n")
        manifest = {
            "format_version": FORMAT_VERSION,
            "dimension": self.dimension,
            "provider_id": self.provider_id,
            "count": len(self),
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> VectorIndex:
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        index = cls(manifest["dimension"], manifest["provider_id"])
        chunks, vectors = [], []
        with open(directory / "entries.jsonl", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                entry = json.loads(line)
                chunks.append(Chunk.from_dict(entry))
                vectors.append(np.array(entry["vector"], dtype=np.float64))
        index.add(chunks, vectors)
        if len(index) != manifest["count"]:
            raise ValueError(f"index manifest lists {manifest['count']} entries, found {len(index)}")
        return index


def build_index(chunks: Iterable[Chunk], vectors: Iterable[EmbeddingVector], dimension: int, provider_id: str) -> VectorIndex:
    return VectorIndex(dimension, provider_id).add(list(chunks), list(vectors))
