"""Generic note cleaning and note-type-specific section header standardization."""

from __future__ import annotations

import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .taxonomy import NOTE_TYPES, CanonicalNoteType

PREAMBLE = "Preamble"
PLACEHOLDERS = ("<DATE>", "<NAME>", "<LOC>", "<PHI>")


@dataclass(frozen=True)
class HeaderSpec:
    canonical: str
    aliases: tuple[str, ...]


class HeaderCatalog:
    """Per note type, the ordered canonical section headers and their surface forms."""

    def __init__(self, entries: Mapping[CanonicalNoteType, list[HeaderSpec]]):
        missing = [t.value for t in NOTE_TYPES if t not in entries]
        if missing:
            raise ValueError(f"header catalog has no entry for: {', '.join(missing)}")
        self.entries: dict[CanonicalNoteType, list[HeaderSpec]] = {}
        for note_type, specs in entries.items():
            names = [s.canonical for s in specs]
            dupes = {n for n in names if names.count(n) > 1}
            if dupes:
                raise ValueError(f"{note_type.value}: duplicate canonical headers {sorted(dupes)}")
            self.entries[note_type] = list(specs)
        self._lookup: dict[CanonicalNoteType, list[tuple[str, str]]] = {}
        for note_type, specs in self.entries.items():
            pairs = {}
            for spec in specs:
                for alias in (spec.canonical, *spec.aliases):
                    pairs.setdefault(alias.lower(), spec.canonical)
            # Longest alias first so "assessment and plan" beats "assessment".
            self._lookup[note_type] = sorted(pairs.items(), key=lambda kv: (-len(kv[0]), kv[0]))

    def aliases(self, note_type: CanonicalNoteType | None = None) -> frozenset[str]:
        types = NOTE_TYPES if note_type is None else (note_type,)
        return frozenset(alias for t in types for alias, _ in self._lookup[t])

    def headers(self, note_type: CanonicalNoteType) -> list[str]:
        return [s.canonical for s in self.entries[note_type]]

    def match(self, line: str, note_type: CanonicalNoteType) -> tuple[str, str] | None:
        """Return ``(canonical, inline_body)`` if ``line`` opens a section."""
        stripped = line.strip()
        low = stripped.lower()
        for alias, canonical in self._lookup[note_type]:
            if not low.startswith(alias):
                continue
            rest = stripped[len(alias):]
            if rest.startswith(":"):
                return canonical, rest[1:].strip()
            # Colon-less headers must fill the line; short aliases ("s", "pe") always need the colon.
            if not rest.strip() and len(alias) >= 3:
                return canonical, ""
        return None

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> HeaderCatalog:
        entries: dict[CanonicalNoteType, list[HeaderSpec]] = {}
        for lineno, line in enumerate(lines, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) not in (2, 3):
                raise ValueError(f"header catalog line {lineno}: expected 2 or 3 tab-separated fields")
            note_type = CanonicalNoteType(parts[0].strip())
            aliases = tuple(a.strip() for a in parts[2].split("|") if a.strip()) if len(parts) == 3 else ()
            entries.setdefault(note_type, []).append(HeaderSpec(parts[1].strip(), aliases))
        return cls(entries)

    @classmethod
    def load(cls, path: str | Path | None = None) -> HeaderCatalog:
        if path is None:
            return default_catalog()
        return cls.from_lines(Path(path).read_text(encoding="utf-8").splitlines())


@lru_cache(maxsize=1)
def default_catalog() -> HeaderCatalog:
    text = resources.files("dense").joinpath("data/note_headers.tsv").read_text(encoding="utf-8")
    return HeaderCatalog.from_lines(text.splitlines())


@dataclass
class CleaningStats:
    placeholders: Counter = field(default_factory=Counter)
    unterminated_spans: int = 0


_DEID_RE = re.compile(r"\[\*\*(.*?)\*\*\]", re.DOTALL)
_DATE_CONTENT_RE = re.compile(r"^[\d\s/.-]*\d[\d\s/.-]*$")
_DATE_WORDS_RE = re.compile(r"\b(?:month|year|day|date|holiday)\b", re.IGNORECASE)
_NAME_RE = re.compile(r"^(?:dr|mr|mrs|ms|miss|doctor)\b|\bname\b|\bfirstname\b|\blastname\b", re.IGNORECASE)
_LOC_RE = re.compile(
    r"\b(?:hospital\d*|location|ward|unit|address|street|city|state|country|zip|apartment|university|company)\b",
    re.IGNORECASE,
)
_BULLET_RE = re.compile(r"^(?:(?:[-*•·‣▪]|\d{1,2}[.)])\s+)+(?P<item>\S.*)$")
_KV_RE = re.compile(r"^(?P<key>[A-Za-z][A-Za-z0-9 /()#%&+-]{0,39}?)\s*:\s+(?P<value>\S.*)$")
_TABULAR_RE = re.compile(r"^(?P<label>[A-Za-z][^\t]*?)(?:\t+| {2,})(?P<rest>\S.*)$")
_TERMINAL = (".", "!", "?")


def placeholder_for(content: str) -> str:
    """Typed placeholder for the inside of a ``[** ... **]`` span."""
    content = content.strip()
    if _DATE_CONTENT_RE.match(content) or _DATE_WORDS_RE.search(content):
        return "<DATE>"
    if _NAME_RE.search(content):
        return "<NAME>"
    if _LOC_RE.search(content):
        return "<LOC>"
    return "<PHI>"


def _deidentify(text: str, stats: CleaningStats) -> str:
    def sub(match: re.Match[str]) -> str:
        token = placeholder_for(match.group(1))
        stats.placeholders[token] += 1
        return token

    text = _DEID_RE.sub(sub, text)
    start = text.find("[**")
    if start != -1:
        # Unterminated span: close it at end of text.
        stats.unterminated_spans += 1
        token = placeholder_for(text[start + 3:])
        stats.placeholders[token] += 1
        text = text[:start] + token
    return text


def _as_sentence(item: str) -> str:
    item = item.strip()
    return item if item.endswith(_TERMINAL) else item + "."


def _tabular_rows(lines: list[str]) -> list[str]:
    out = []
    i = 0
    while i < len(lines):
        j = i
        while j < len(lines) and _is_tabular(lines[j]):
            j += 1
        if j - i >= 2:
            for line in lines[i:j]:
                m = _TABULAR_RE.match(line.strip())
                out.append(f"{m.group('label').strip()}: {m.group('rest')}")
            i = j
        else:
            out.append(lines[i])
            i += 1
    return out


def _is_tabular(line: str) -> bool:
    m = _TABULAR_RE.match(line.strip())
    if m is None:
        return False
    label = m.group("label").strip()
    return len(label) <= 30 and len(label.split()) <= 4 and not label.endswith((".", ",", ";", ":", "!", "?"))


def _is_kv(line: str, protected: frozenset[str]) -> bool:
    m = _KV_RE.match(line)
    return m is not None and m.group("key").strip().lower() not in protected


def _join_runs(lines: list[str], predicate, transform, min_run: int) -> list[str]:
    """Replace maximal runs of at least ``min_run`` matching lines by one line of sentences."""
    out = []
    i = 0
    while i < len(lines):
        j = i
        while j < len(lines) and predicate(lines[j]):
            j += 1
        if j > i and j - i >= min_run:
            out.append(" ".join(_as_sentence(transform(line)) for line in lines[i:j]))
            i = j
        else:
            out.append(lines[i])
            i += 1
    return out


def _bullet_item(line: str) -> str:
    return _BULLET_RE.match(line).group("item")


def _split_inline_headers(lines: list[str], protected: frozenset[str]) -> list[str]:
    out = []
    for line in lines:
        m = _KV_RE.match(line)
        if m is not None and m.group("key").strip().lower() in protected:
            out.append(m.group("key").strip() + ":")
            out.append(m.group("value"))
        else:
            out.append(line)
    return out


def clean_generic(
    text: str,
    stats: CleaningStats | None = None,
    header_aliases: frozenset[str] | None = None,
) -> str:
    """Normalize one note body.

    Unicode NFC, typed de-identification placeholders, tabular rows to
    ``label: value``, bullets to prose sentences, runs of ``key: value`` lines
    joined into one line, whitespace collapsed. Lines keyed by a section
    header alias are left for header detection (split onto their own line).
    """
    if stats is None:
        stats = CleaningStats()
    if header_aliases is None:
        header_aliases = default_catalog().aliases()
    if not text:
        return ""
    text = unicodedata.normalize("NFC", text).replace("\r\n", "\n").replace("\r", "\n")
    text = _deidentify(text, stats)
    lines = _tabular_rows(text.split("\n"))
    lines = [" ".join(line.split()) for line in lines]
    lines = _join_runs(lines, lambda s: _BULLET_RE.match(s) is not None, _bullet_item, min_run=1)
    lines = _split_inline_headers(lines, header_aliases)
    lines = _join_runs(lines, lambda s: _is_kv(s, header_aliases), lambda s: s, min_run=2)

    out: list[str] = []
    for line in lines:
        if not line and (not out or not out[-1]):
            continue
        out.append(line)
    while out and not out[-1]:
        out.pop()
    return "\n".join(out)


@dataclass
class CleanNote:
    note_type: CanonicalNoteType
    sections: list[tuple[str, str]]
    provenance: tuple[int, int]

    def render(self) -> str:
        parts = []
        for header, body in self.sections:
            if header == PREAMBLE:
                if body:
                    parts.append(body)
            else:
                parts.append(f"{header}:\n{body}" if body else f"{header}:")
        return "\n\n".join(parts)

    def section_text(self, header: str) -> str:
        return "\n\n".join(body for h, body in self.sections if h == header and body)

    def to_dict(self) -> dict:
        return {
            "note_type": self.note_type.value,
            "subject_id": self.provenance[0],
            "hadm_id": self.provenance[1],
            "sections": [[h, b] for h, b in self.sections],
        }

    @classmethod
    def from_dict(cls, d: dict) -> CleanNote:
        return cls(
            CanonicalNoteType(d["note_type"]),
            [(h, b) for h, b in d["sections"]],
            (d["subject_id"], d["hadm_id"]),
        )


def standardize_headers(
    text: str,
    note_type: CanonicalNoteType,
    catalog: HeaderCatalog | None = None,
    provenance: tuple[int, int] = (0, 0),
) -> CleanNote:
    """Split cleaned text into canonical sections.

    A header is an alias at line start followed by a colon, or an alias that
    fills the whole line. Text before the first header becomes ``Preamble``.
    """
    catalog = catalog or default_catalog()
    sections: list[tuple[str, list[str]]] = []
    current: tuple[str, list[str]] | None = None
    for line in text.split("\n"):
        hit = catalog.match(line, note_type)
        if hit is not None:
            current = (hit[0], [hit[1]] if hit[1] else [])
            sections.append(current)
            continue
        if current is None:
            current = (PREAMBLE, [])
            sections.append(current)
        current[1].append(line)
    if not sections:
        sections.append((PREAMBLE, []))
    return CleanNote(note_type, [(h, "\n".join(body).strip()) for h, body in sections], provenance)


def preprocess_note(
    text: str,
    note_type: CanonicalNoteType,
    catalog: HeaderCatalog | None = None,
    provenance: tuple[int, int] = (0, 0),
    stats: CleaningStats | None = None,
) -> CleanNote:
    catalog = catalog or default_catalog()
    cleaned = clean_generic(text, stats, header_aliases=catalog.aliases(note_type))
    return standardize_headers(cleaned, note_type, catalog, provenance)
