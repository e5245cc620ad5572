"""Visit-level pivoting and per-patient timelines."""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, time
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

from .taxonomy import NOTE_TYPES, CanonicalNoteType, RawNoteRecord, RemapRule, classify_note

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["ROW_ID", "SUBJECT_ID", "HADM_ID", "CHARTDATE", "CHARTTIME", "CATEGORY", "DESCRIPTION", "TEXT"]
NOTE_SEPARATOR = "\n\n"


class IngestError(ValueError):
    pass


def _parse_int(value: str, column: str, lineno: int, required: bool) -> int | None:
    value = value.strip()
    if not value:
        if required:
            raise IngestError(f"line {lineno}: {column} is empty")
        return None
    try:
        return int(float(value)) if "." in value else int(value)
    except ValueError:
        raise IngestError(f"line {lineno}: {column}={value!r} is not an integer") from None


def _parse_date(value: str, lineno: int) -> date:
    try:
        return date.fromisoformat(value.strip()[:10])
    except ValueError:
        raise IngestError(f"line {lineno}: CHARTDATE={value!r} is not an ISO date") from None


def _parse_datetime(value: str, lineno: int) -> datetime | None:
    value = value.strip()
    if not value:
        return None
    try:
        return datetime.fromisoformat(value)
    except ValueError:
        raise IngestError(f"line {lineno}: CHARTTIME={value!r} is not an ISO timestamp") from None


def read_notes_csv(source: str | Path | IO[str]) -> list[RawNoteRecord]:
    """Read NOTEEVENTS-style CSV (header row, RFC-4180 quoting)."""
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return read_notes_csv(fh)
    reader = csv.DictReader(source)
    missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise IngestError(f"CSV header is missing columns: {', '.join(missing)}")
    records = []
    for lineno, row in enumerate(reader, start=2):
        records.append(
            RawNoteRecord(
                row_id=_parse_int(row["ROW_ID"], "ROW_ID", lineno, required=True),
                subject_id=_parse_int(row["SUBJECT_ID"], "SUBJECT_ID", lineno, required=False),
                hadm_id=_parse_int(row["HADM_ID"], "HADM_ID", lineno, required=False),
                chartdate=_parse_date(row["CHARTDATE"], lineno),
                charttime=_parse_datetime(row["CHARTTIME"], lineno),
                category=row["CATEGORY"] or "",
                description=row["DESCRIPTION"] or "",
                text=row["TEXT"] or "",
            )
        )
    return records


def write_notes_csv(records: Iterable[RawNoteRecord], dest: str | Path | IO[str]) -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            write_notes_csv(records, fh)
        return
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow(
            [
                r.row_id,
                "" if r.subject_id is None else r.subject_id,
                "" if r.hadm_id is None else r.hadm_id,
                r.chartdate.isoformat(),
                "" if r.charttime is None else r.charttime.isoformat(sep=" "),
                r.category,
                r.description,
                r.text,
            ]
        )


def notes_to_csv_string(records: Iterable[RawNoteRecord]) -> str:
    buf = io.StringIO()
    write_notes_csv(records, buf)
    return buf.getvalue()


@dataclass(frozen=True)
class ClassifiedNote:
    record: RawNoteRecord
    note_type: CanonicalNoteType

    def to_dict(self) -> dict:
        r = self.record
        return {
            "row_id": r.row_id,
            "subject_id": r.subject_id,
            "hadm_id": r.hadm_id,
            "chartdate": r.chartdate.isoformat(),
            "charttime": None if r.charttime is None else r.charttime.isoformat(),
            "category": r.category,
            "description": r.description,
            "text": r.text,
            "note_type": self.note_type.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ClassifiedNote:
        record = RawNoteRecord(
            row_id=d["row_id"],
            subject_id=d["subject_id"],
            hadm_id=d["hadm_id"],
            chartdate=date.fromisoformat(d["chartdate"]),
            charttime=None if d["charttime"] is None else datetime.fromisoformat(d["charttime"]),
            category=d["category"],
            description=d["description"],
            text=d["text"],
        )
        return cls(record, CanonicalNoteType(d["note_type"]))


def classify_records(records: Iterable[RawNoteRecord], rules: Sequence[RemapRule] | None = None) -> list[ClassifiedNote]:
    return [ClassifiedNote(r, classify_note(r, rules)) for r in records]


@dataclass
class VisitRecord:
    subject_id: int
    hadm_id: int
    chartdate: date
    notes: dict[CanonicalNoteType, str]
    source_row_ids: list[int] = field(default_factory=list)
    # Earliest charttime contributing to each non-empty column.
    first_charttimes: dict[CanonicalNoteType, datetime | None] = field(default_factory=dict)

    @property
    def key(self) -> tuple[int, int]:
        return (self.subject_id, self.hadm_id)

    def present_types(self) -> list[CanonicalNoteType]:
        return [t for t in NOTE_TYPES if self.notes.get(t)]

    def to_dict(self) -> dict:
        d: dict = {
            "subject_id": self.subject_id,
            "hadm_id": self.hadm_id,
            "chartdate": self.chartdate.isoformat(),
        }
        for t in NOTE_TYPES:
            d[t.value] = self.notes.get(t, "")
        d["source_row_ids"] = list(self.source_row_ids)
        d["first_charttimes"] = {
            t.value: (None if ts is None else ts.isoformat()) for t, ts in self.first_charttimes.items()
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> VisitRecord:
        return cls(
            subject_id=d["subject_id"],
            hadm_id=d["hadm_id"],
            chartdate=date.fromisoformat(d["chartdate"]),
            notes={t: d.get(t.value, "") for t in NOTE_TYPES},
            source_row_ids=list(d.get("source_row_ids", [])),
            first_charttimes={
                CanonicalNoteType(k): (None if v is None else datetime.fromisoformat(v))
                for k, v in d.get("first_charttimes", {}).items()
            },
        )


@dataclass(frozen=True)
class Reject:
    row_id: int
    reason: str


@dataclass
class PivotResult:
    visits: list[VisitRecord]
    rejects: list[Reject]


def _note_order(note: ClassifiedNote) -> tuple[datetime, int]:
    r = note.record
    return (r.charttime or datetime.combine(r.chartdate, time.min), r.row_id)


def pivot_notes(notes: Iterable[ClassifiedNote]) -> PivotResult:
    """Group classified notes into one row per ``(subject_id, hadm_id)``.

    Texts of one type are joined with a blank line in (charttime, row_id)
    order. Empty texts count as sources but add nothing to the columns. Rows
    without an admission or patient id go to the rejects list.
    """
    groups: dict[tuple[int, int], list[ClassifiedNote]] = defaultdict(list)
    rejects = []
    for note in notes:
        r = note.record
        if r.subject_id is None:
            rejects.append(Reject(r.row_id, "missing SUBJECT_ID"))
        elif r.hadm_id is None:
            rejects.append(Reject(r.row_id, "missing HADM_ID"))
        else:
            groups[(r.subject_id, r.hadm_id)].append(note)

    visits = []
    for (subject_id, hadm_id), members in sorted(groups.items()):
        members.sort(key=_note_order)
        texts: dict[CanonicalNoteType, list[str]] = defaultdict(list)
        first_times: dict[CanonicalNoteType, datetime | None] = {}
        for note in members:
            if note.record.text == "":
                continue
            texts[note.note_type].append(note.record.text)
            first_times.setdefault(note.note_type, note.record.charttime)
        visits.append(
            VisitRecord(
                subject_id=subject_id,
                hadm_id=hadm_id,
                chartdate=min(n.record.chartdate for n in members),
                notes={t: NOTE_SEPARATOR.join(texts.get(t, [])) for t in NOTE_TYPES},
                source_row_ids=[n.record.row_id for n in members],
                first_charttimes={t: first_times[t] for t in NOTE_TYPES if t in first_times},
            )
        )
    if rejects:
        logger.info("pivot rejected %d rows", len(rejects))
    return PivotResult(visits, rejects)


@dataclass
class PatientTimeline:
    subject_id: int
    visits: list[VisitRecord]

    def __len__(self) -> int:
        return len(self.visits)

    def visit_index(self, hadm_id: int) -> int:
        for i, v in enumerate(self.visits):
            if v.hadm_id == hadm_id:
                return i
        raise KeyError(hadm_id)

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "visits": [dict(v.to_dict(), visit_index=i) for i, v in enumerate(self.visits)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> PatientTimeline:
        visits = sorted(d["visits"], key=lambda v: v["visit_index"])
        return cls(d["subject_id"], [VisitRecord.from_dict(v) for v in visits])


def build_timelines(visits: Iterable[VisitRecord]) -> list[PatientTimeline]:
    by_subject: dict[int, list[VisitRecord]] = defaultdict(list)
    for v in visits:
        by_subject[v.subject_id].append(v)
    return [
        PatientTimeline(sid, sorted(vs, key=lambda v: (v.chartdate, v.hadm_id)))
        for sid, vs in sorted(by_subject.items())
    ]


def filter_cohort(
    timelines: Iterable[PatientTimeline],
    min_visits: int = 1,
    require_type: CanonicalNoteType | None = None,
) -> list[PatientTimeline]:
    if min_visits < 1:
        raise ValueError(f"min_visits must be >= 1, got {min_visits}")
    kept = []
    for tl in timelines:
        if len(tl.visits) < min_visits:
            continue
        if require_type is not None and not all(v.notes.get(require_type) for v in tl.visits):
            continue
        kept.append(tl)
    return kept


def write_jsonl(rows: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True))
            fh.write("\n")


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def write_rejects_csv(rejects: Iterable[Reject], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row_id", "reason"])
        for r in rejects:
            writer.writerow([r.row_id, r.reason])
