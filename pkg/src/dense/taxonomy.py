"""Canonical note taxonomy and the deterministic label re-mapping engine.

Raw NOTEEVENTS rows carry a noisy ``CATEGORY`` and ``DESCRIPTION``. Every row is
mapped to exactly one of sixteen canonical note types by an ordered list of
regex rules over the normalized description, then by category-level defaults,
then by the ``misc_notes`` fallback.
"""

from __future__ import annotations

import logging
import re
import unicodedata
from dataclasses import dataclass, field
from datetime import date, datetime
from enum import Enum
from functools import cached_property, lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

CATEGORY_DEFAULT = "*"


class CanonicalNoteType(str, Enum):
    ADMISSION_NOTES = "admission_notes"
    CONSULT_NOTES = "consult_notes"
    DISCHARGE_PLANNING = "discharge_planning"
    DISCHARGE_SUMMARY = "discharge_summary"
    ECG_REPORTS = "ecg_reports"
    ECHO_REPORTS = "echo_reports"
    EVENT_NOTES = "event_notes"
    MISC_NOTES = "misc_notes"
    NURSING_OTHER_NOTES = "nursing_other_notes"
    NURSING_SHIFT_NOTES = "nursing_shift_notes"
    NUTRITION_NOTES = "nutrition_notes"
    PHARMACY_NOTES = "pharmacy_notes"
    PROCEDURE_NOTES = "procedure_notes"
    PROGRESS_NOTES = "progress_notes"
    RADIOLOGY_REPORTS = "radiology_reports"
    TRANSFER_NOTES = "transfer_notes"

    def __str__(self) -> str:
        return self.value


NOTE_TYPES: tuple[CanonicalNoteType, ...] = tuple(CanonicalNoteType)
_TYPE_VALUES = frozenset(t.value for t in CanonicalNoteType)


@dataclass(frozen=True)
class RawNoteRecord:
    """One row of the source note table."""

    row_id: int
    subject_id: int | None
    hadm_id: int | None
    chartdate: date
    charttime: datetime | None = None
    category: str = ""
    description: str = ""
    text: str = ""


_PUNCT_RE = re.compile(r"[\W_]+", re.UNICODE)


def normalize_label(raw: str) -> str:
    """Lowercase, turn punctuation runs into single spaces and collapse whitespace.

    >>> normalize_label("Progress Note - MICU")
    'progress note micu'
    """
    if not raw:
        return ""
    text = unicodedata.normalize("NFKC", raw).lower()
    return " ".join(_PUNCT_RE.sub(" ", text).split())


@dataclass(frozen=True)
class RemapRule:
    priority: int
    pattern: str
    target: str
    applies_to: str | None = None

    @property
    def is_category_default(self) -> bool:
        return self.pattern == CATEGORY_DEFAULT

    @cached_property
    def _pattern_re(self) -> re.Pattern[str] | None:
        if self.is_category_default:
            return None
        return re.compile(self.pattern, re.IGNORECASE)

    @cached_property
    def _guard_re(self) -> re.Pattern[str] | None:
        if self.applies_to is None:
            return None
        return re.compile(self.applies_to, re.IGNORECASE)

    def matches(self, description: str, category: str) -> bool:
        """Test the rule against already-normalized labels."""
        if self._guard_re is not None and not self._guard_re.fullmatch(category):
            return False
        if self._pattern_re is None:
            return self._guard_re is not None
        return self._pattern_re.search(description) is not None


class RuleSetError(ValueError):
    """A rule file could not be parsed or failed validation."""


def parse_rules(lines: Iterable[str], source: str = "<rules>") -> list[RemapRule]:
    """Parse ``priority<TAB>pattern<TAB>guard<TAB>target`` lines; ``#`` starts a comment."""
    rules = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) == 3:
            parts.insert(2, "")
        if len(parts) != 4:
            raise RuleSetError(f"{source}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        priority, pattern, guard, target = (p.strip() for p in parts)
        try:
            prio = int(priority)
        except ValueError:
            raise RuleSetError(f"{source}:{lineno}: priority {priority!r} is not an integer") from None
        guard_value = None if guard in ("", "-") else guard
        for label, regex in (("pattern", pattern if pattern != CATEGORY_DEFAULT else None), ("guard", guard_value)):
            if regex is None:
                continue
            try:
                re.compile(regex)
            except re.error as exc:
                raise RuleSetError(f"{source}:{lineno}: invalid {label} regex: {exc}") from None
        if pattern == CATEGORY_DEFAULT and guard_value is None:
            raise RuleSetError(f"{source}:{lineno}: category default rule needs a category guard")
        rules.append(RemapRule(priority=prio, pattern=pattern, target=target, applies_to=guard_value))
    return sorted(rules, key=lambda r: r.priority)


def load_rules(path: str | Path | None = None, *, validate: bool = True) -> list[RemapRule]:
    """Load a rule file (the shipped default when ``path`` is None).

    Raises ``RuleSetError`` if validation reports errors.
    """
    if path is None:
        text = resources.files("dense").joinpath("data/remap_rules.tsv").read_text(encoding="utf-8")
        source = "remap_rules.tsv"
    else:
        text = Path(path).read_text(encoding="utf-8")
        source = str(path)
    rules = parse_rules(text.splitlines(), source=source)
    if validate:
        report = validate_rules(rules)
        if report.errors:
            raise RuleSetError("; ".join(report.errors))
        for warning in report.warnings:
            logger.warning("%s: %s", source, warning)
    return rules


def default_rules() -> list[RemapRule]:
    return list(_default_rules())


@lru_cache(maxsize=1)
def _default_rules() -> tuple[RemapRule, ...]:
    return tuple(load_rules(None, validate=False))


def classify_labels(category: str, description: str, rules: Sequence[RemapRule] | None = None) -> CanonicalNoteType:
    """Classify a ``(category, description)`` pair.

    Description rules fire first in priority order, then category defaults,
    then ``misc_notes``.
    """
    rule = winning_rule(category, description, _default_rules() if rules is None else rules)
    return CanonicalNoteType.MISC_NOTES if rule is None else CanonicalNoteType(rule.target)


def classify_note(record: RawNoteRecord, rules: Sequence[RemapRule] | None = None) -> CanonicalNoteType:
    return classify_labels(record.category, record.description, rules)


def winning_rule(category: str, description: str, rules: Sequence[RemapRule]) -> RemapRule | None:
    desc = normalize_label(description)
    cat = normalize_label(category)
    ordered = sorted(rules, key=lambda r: (r.is_category_default, r.priority))
    for rule in ordered:
        if rule.matches(desc, cat):
            return rule
    return None


@dataclass(frozen=True)
class LabelFixture:
    category: str
    description: str
    expected: CanonicalNoteType


def load_fixtures(path: str | Path | None = None) -> list[LabelFixture]:
    if path is None:
        text = resources.files("dense").joinpath("data/taxonomy_fixtures.tsv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    fixtures = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        category, description, expected = line.split("\t")
        fixtures.append(LabelFixture(category, description, CanonicalNoteType(expected.strip())))
    return fixtures


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    firings: dict[int, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors


def validate_rules(rules: Sequence[RemapRule], fixtures: Sequence[LabelFixture] | None = None) -> ValidationReport:
    """Audit a rule set against a fixture corpus.

    Errors: targets outside the enumeration, equal-priority rules that both
    match one fixture. Warnings: other duplicate priorities, rules that never
    win on any fixture.
    """
    if fixtures is None:
        fixtures = load_fixtures()
    report = ValidationReport()
    for rule in rules:
        if rule.target not in _TYPE_VALUES:
            report.errors.append(f"rule {rule.priority}: target {rule.target!r} is not a canonical note type")

    by_priority: dict[int, list[RemapRule]] = {}
    for rule in rules:
        by_priority.setdefault(rule.priority, []).append(rule)
    normalized = [(normalize_label(f.description), normalize_label(f.category), f) for f in fixtures]
    for priority, group in sorted(by_priority.items()):
        if len(group) < 2:
            continue
        clash = None
        for desc, cat, fixture in normalized:
            hits = [r for r in group if r.matches(desc, cat)]
            if len(hits) > 1:
                clash = fixture
                break
        if clash is not None:
            report.errors.append(
                f"priority {priority}: {len(group)} rules share this priority and overlap on "
                f"fixture {clash.description!r}"
            )
        else:
            report.warnings.append(f"priority {priority}: {len(group)} rules share this priority")

    ordered = sorted(rules, key=lambda r: r.priority)
    firings = {id(r): 0 for r in ordered}
    for _, _, fixture in normalized:
        rule = winning_rule(fixture.category, fixture.description, ordered)
        if rule is not None:
            firings[id(rule)] += 1
    for rule in ordered:
        count = firings[id(rule)]
        report.firings[rule.priority] = report.firings.get(rule.priority, 0) + count
        if count == 0:
            report.warnings.append(f"rule {rule.priority} ({rule.pattern!r}) never fires on the fixture corpus")
    return report
