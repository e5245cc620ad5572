"""Seeded pseudo-clinical note corpus for desk-scale runs without restricted data."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from typing import Mapping

import numpy as np

from .taxonomy import NOTE_TYPES, CanonicalNoteType, RawNoteRecord

T = CanonicalNoteType

DEFAULT_COVERAGE: dict[CanonicalNoteType, float] = {
    T.NURSING_OTHER_NOTES: 0.98,
    T.RADIOLOGY_REPORTS: 0.92,
    T.PROGRESS_NOTES: 0.085,
    T.ECG_REPORTS: 0.80,
    T.ECHO_REPORTS: 0.20,
    T.DISCHARGE_SUMMARY: 0.60,
    T.TRANSFER_NOTES: 0.35,
    T.PROCEDURE_NOTES: 0.10,
    T.ADMISSION_NOTES: 0.12,
    T.CONSULT_NOTES: 0.05,
    T.EVENT_NOTES: 0.02,
    T.DISCHARGE_PLANNING: 0.01,
    T.PHARMACY_NOTES: 0.005,
    T.NURSING_SHIFT_NOTES: 0.003,
    T.MISC_NOTES: 0.65,
    T.NUTRITION_NOTES: 0.05,
}

# Noisy (CATEGORY, DESCRIPTION) pairs that the shipped rules map back to each type.
LABELS: dict[CanonicalNoteType, list[tuple[str, str]]] = {
    T.ADMISSION_NOTES: [("Physician ", "Admission Note"), ("Physician ", "H&P")],
    T.CONSULT_NOTES: [("Consult", "Cardiology Consult"), ("General", "GI Consult"), ("Physician ", "Critical Care Consult")],
    T.DISCHARGE_PLANNING: [("Case Management ", "DC Plan"), ("Case Management ", "Discharge Plan Note"), ("Case Management ", "Dischaarge Planning Update")],
    T.DISCHARGE_SUMMARY: [("Discharge summary", "Report"), ("Discharge summary", "Discharge Summary")],
    T.ECG_REPORTS: [("ECG", "Report"), ("ECG", "ECG Report")],
    T.ECHO_REPORTS: [("Echo", "Report"), ("Echo", "Echo Report")],
    T.EVENT_NOTES: [("General", "Family Meeting"), ("Physician ", "Code Discussion")],
    T.MISC_NOTES: [("General", "--error--"), ("Nursing/other", "Generic Note"), ("Social Work", "Social Work Note")],
    T.NURSING_OTHER_NOTES: [("Nursing/other", "Report"), ("Nursing", "Nursing Note"), ("Nursing/other", "")],
    T.NURSING_SHIFT_NOTES: [("Nursing", "Nursing Progress Note 0700-1900"), ("Nursing", "Note 7a-7p"), ("Nursing", "Shift Report")],
    T.NUTRITION_NOTES: [("Nutrition", "Nutrition Assessment"), ("Nutrition", "Report")],
    T.PHARMACY_NOTES: [("Pharmacy", "Pharmacy Medication Reconciliation"), ("Pharmacy", "Report")],
    T.PROCEDURE_NOTES: [("Physician ", "thoracentesis"), ("General", "intubation")],
    T.PROGRESS_NOTES: [("Physician ", "Progress Note"), ("Physician ", "Attending PN"), ("Physician ", "MICU Resident Progres Note")],
    T.RADIOLOGY_REPORTS: [("Radiology", "CHEST (PORTABLE AP)"), ("Radiology", "CT HEAD W/O CONTRAST"), ("Radiology", "Report")],
    T.TRANSFER_NOTES: [("Nursing", "Nursing Transfer Note")],
}


@dataclass(frozen=True)
class Condition:
    name: str
    symptoms: tuple[str, ...]
    findings: tuple[str, ...]
    imaging: tuple[str, ...]
    medications: tuple[str, ...]


CONDITIONS = (
    Condition(
        "congestive heart failure",
        ("shortness of breath on exertion", "orthopnea", "bilateral leg swelling"),
        ("bibasilar crackles", "jugular venous distension", "pitting edema to the knees"),
        ("mild pulmonary vascular congestion", "small bilateral pleural effusions", "stable cardiomegaly"),
        ("furosemide", "metoprolol", "lisinopril"),
    ),
    Condition(
        "chronic obstructive pulmonary disease",
        ("productive cough", "wheezing", "increased dyspnea"),
        ("diffuse expiratory wheezes", "prolonged expiratory phase", "accessory muscle use"),
        ("hyperinflated lungs", "flattened diaphragms", "no focal consolidation"),
        ("albuterol", "ipratropium", "prednisone"),
    ),
    Condition(
        "community acquired pneumonia",
        ("fever", "pleuritic chest pain", "cough with sputum"),
        ("right lower lobe rhonchi", "tachypnea", "decreased breath sounds at the right base"),
        ("right lower lobe consolidation", "patchy opacity at the right base", "no pneumothorax"),
        ("ceftriaxone", "azithromycin", "acetaminophen"),
    ),
    Condition(
        "sepsis from urinary source",
        ("chills", "dysuria", "confusion"),
        ("hypotension responsive to fluids", "suprapubic tenderness", "warm extremities"),
        ("no acute cardiopulmonary process", "lines and tubes in good position", "clear lungs"),
        ("piperacillin tazobactam", "norepinephrine", "normal saline"),
    ),
    Condition(
        "acute kidney injury",
        ("decreased urine output", "fatigue", "nausea"),
        ("dry mucous membranes", "creatinine rising from baseline", "no asterixis"),
        ("normal renal size without hydronephrosis", "no acute process", "stable appearance"),
        ("isotonic fluids", "sodium bicarbonate", "renally dosed medications"),
    ),
    Condition(
        "diabetic ketoacidosis",
        ("polyuria", "abdominal pain", "vomiting"),
        ("Kussmaul respirations", "anion gap acidosis", "tachycardia"),
        ("no acute cardiopulmonary process", "clear lungs", "normal heart size"),
        ("insulin infusion", "potassium repletion", "dextrose containing fluids"),
    ),
)

PLACEHOLDER_SPANS = ("[**{date}**]", "[**Name (NI) {n}**]", "[**Hospital1 {n}**]", "[**Known lastname {n}**]")


class SyntheticSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    patient_count: int
    min_visits: int = 10
    max_visits: int = 57
    coverage: Mapping[CanonicalNoteType, float] = field(default_factory=lambda: dict(DEFAULT_COVERAGE))
    seed: int = 1
    start_date: date = date(2130, 1, 1)

    def __post_init__(self):
        if self.patient_count < 1:
            raise SyntheticSpecError(f"patient_count must be >= 1, got {self.patient_count}")
        if not 1 <= self.min_visits <= self.max_visits <= 100:
            raise SyntheticSpecError(f"visits range must satisfy 1 <= min <= max <= 100, got {self.min_visits}..{self.max_visits}")
        for t, p in self.coverage.items():
            if not isinstance(t, CanonicalNoteType):
                raise SyntheticSpecError(f"unknown note type {t!r}")
            if not 0.0 <= float(p) <= 1.0:
                raise SyntheticSpecError(f"coverage for {t.value} must lie in [0, 1], got {p}")

    def probability(self, note_type: CanonicalNoteType) -> float:
        return float(self.coverage.get(note_type, 0.0))


class _Writer:
    """Per-patient text builder drawing every choice from one generator."""

    def __init__(self, rng: np.random.Generator, condition: Condition, comorbidity: Condition):
        self.rng = rng
        self.c = condition
        self.co = comorbidity

    def pick(self, options):
        return options[int(self.rng.integers(len(options)))]

    def phi(self, when: date) -> str:
        template = self.pick(PLACEHOLDER_SPANS)
        return template.format(date=f"{when.year}-{when.month}-{when.day}", n=int(self.rng.integers(1, 999)))

    def vitals(self) -> str:
        r = self.rng
        return "\n".join(
            [
                f"HR: {int(r.integers(58, 121))}",
                f"BP: {int(r.integers(92, 166))}/{int(r.integers(48, 96))}",
                f"RR: {int(r.integers(12, 29))}",
                f"SpO2: {int(r.integers(88, 101))}%",
            ]
        )

    def sections(self, note_type: CanonicalNoteType, when: date) -> list[tuple[str, str]]:
        c, co, pick = self.c, self.co, self.pick
        med = pick(c.medications)
        sym = pick(c.symptoms)
        find = pick(c.findings)
        img = pick(c.imaging)
        if note_type is T.PROGRESS_NOTES:
            return [
                ("Subjective", f"Patient reports {sym}. Seen with family at bedside on {self.phi(when)}."),
                ("Objective", f"{self.vitals()}\nExam notable for {find}. Imaging shows {img}."),
                ("Assessment", f"Patient with {c.name} and history of {co.name}. Clinically {pick(('improving', 'stable', 'slowly improving'))} with {find}."),
                ("Plan", f"- continue {med}\n- monitor electrolytes and urine output daily\n- follow up with {pick(('cardiology', 'pulmonology', 'primary care', 'nephrology'))} after discharge"),
            ]
        if note_type is T.RADIOLOGY_REPORTS:
            return [
                ("Indication", f"Evaluate for {c.name}."),
                ("Comparison", f"Prior study from {self.phi(when)}."),
                ("Findings", f"There is {img}. The cardiomediastinal silhouette is {pick(('unchanged', 'stable', 'within normal limits'))}."),
                ("Impression", f"{img.capitalize()}."),
            ]
        if note_type is T.NURSING_OTHER_NOTES:
            return [
                ("Assessment", f"Patient alert, reports {sym}."),
                ("Action", f"Administered {med} as ordered. Repositioned every two hours."),
                ("Response", f"Tolerated well, {pick(('no distress noted', 'resting comfortably', 'vital signs stable'))}."),
                ("Plan", f"Continue to monitor and notify team of changes. Family updated by {self.phi(when)}."),
            ]
        if note_type is T.NURSING_SHIFT_NOTES:
            return [
                ("Physical Assessment", f"Alert and oriented. {find.capitalize()}."),
                ("Interventions", f"Given {med}. Fluids adjusted per protocol."),
                ("Response", "Hemodynamically stable through the shift."),
                ("Plan", "Continue current care overnight."),
            ]
        if note_type is T.ECG_REPORTS:
            return [
                ("Findings", f"{pick(('Sinus rhythm', 'Sinus tachycardia', 'Atrial fibrillation with controlled ventricular response'))}. {pick(('Nonspecific ST-T wave changes', 'No acute ST changes', 'Left axis deviation'))}."),
                ("Rhythm Analysis", f"Rate {int(self.rng.integers(55, 125))}. Compared with prior tracing, {pick(('no significant change', 'rate has increased', 'findings are similar'))}."),
            ]
        if note_type is T.ECHO_REPORTS:
            return [
                ("Findings", f"Left ventricular wall thickness is normal. {pick(('Mild global hypokinesis', 'Normal regional wall motion', 'Moderate global hypokinesis'))}."),
                ("Ejection Fraction", f"LVEF {int(self.rng.integers(25, 66))}%."),
                ("Valve Assessment", f"{pick(('Mild mitral regurgitation', 'Trace tricuspid regurgitation', 'No significant valvular disease'))}."),
                ("Conclusions", f"Findings consistent with history of {c.name}."),
            ]
        if note_type is T.DISCHARGE_SUMMARY:
            return [
                ("Chief Complaint", f"{sym.capitalize()}."),
                ("History of Present Illness", f"Patient with {co.name} admitted to {self.phi(when)} with {sym}."),
                ("Hospital Course", f"Treated for {c.name} with {med}. {find.capitalize()} improved over the admission."),
                ("Discharge Medications", ", ".join(c.medications) + "."),
                ("Discharge Diagnosis", f"{c.name.capitalize()}."),
                ("Discharge Instructions", "Return for worsening symptoms. Take medications as prescribed."),
                ("Follow-up", f"Follow up with primary care within two weeks of {self.phi(when)}."),
            ]
        if note_type is T.TRANSFER_NOTES:
            return [
                ("Status", f"Hemodynamically stable on {med}."),
                ("Destination Unit", pick(("Medical floor.", "Step down unit.", "Cardiac care unit."))),
                ("Reason for Transfer", f"Improving {c.name}, no longer requires intensive monitoring."),
            ]
        if note_type is T.PROCEDURE_NOTES:
            return [
                ("Indication", f"{pick(('Respiratory failure', 'Pleural effusion', 'Central access'))} in setting of {c.name}."),
                ("Technique", "Sterile technique with time out performed. Ultrasound guidance used."),
                ("Findings", pick(("Straw colored fluid removed.", "Placement confirmed by imaging.", "Procedure completed without difficulty."))),
                ("Complications", "None."),
            ]
        if note_type is T.ADMISSION_NOTES:
            return [
                ("Chief Complaint", f"{sym.capitalize()}."),
                ("History of Present Illness", f"Patient with {co.name} presents with {sym} for several days. Seen at {self.phi(when)} before transfer."),
                ("Past Medical History", f"{co.name.capitalize()}. {c.name.capitalize()}."),
                ("Medications", ", ".join(co.medications) + "."),
                ("Allergies", pick(("No known drug allergies.", "Penicillin causes rash.", "Sulfa drugs."))),
                ("Physical Exam", f"{self.vitals()}\n{find.capitalize()}."),
                ("Assessment and Plan", f"Admit for {c.name}. Start {med}."),
            ]
        if note_type is T.CONSULT_NOTES:
            return [
                ("Reason for Consultation", f"Management of {c.name}."),
                ("History of Present Illness", f"Patient with {sym} and history of {co.name}."),
                ("Assessment", f"Findings consistent with {c.name}."),
                ("Plan", f"Recommend continuing {med} and repeat imaging."),
            ]
        if note_type is T.EVENT_NOTES:
            return [
                ("Event Description", pick(("Family meeting held to discuss goals of care.", "Rapid response called for hypotension.", "Code status discussed with patient."))),
                ("Clinical Response", f"Plan of care reviewed with {self.phi(when)}. Patient remains full code."),
            ]
        if note_type is T.DISCHARGE_PLANNING:
            return [
                ("Education", f"Reviewed {med} dosing and warning signs."),
                ("Home Needs", pick(("Home oxygen arranged.", "Visiting nurse services arranged.", "Rehabilitation placement pending."))),
                ("Follow-up", f"Appointment scheduled at {self.phi(when)}."),
            ]
        if note_type is T.NUTRITION_NOTES:
            return [
                ("Diet", pick(("Cardiac diet with fluid restriction.", "Diabetic diet.", "Tube feeds at goal."))),
                ("Weight", f"{int(self.rng.integers(48, 121))} kg."),
                ("Assessment", "Intake adequate for estimated needs."),
                ("Recommendations", "Continue current regimen and weekly weights."),
            ]
        if note_type is T.PHARMACY_NOTES:
            return [
                ("Medication List", ", ".join(c.medications + co.medications) + "."),
                ("Dose", f"{med.capitalize()} adjusted for renal function."),
                ("Route", pick(("Intravenous.", "Oral.", "Subcutaneous."))),
                ("Recommendations", "Monitor levels and renal function."),
            ]
        return [
            ("Free-text", f"{pick(('Spoke with family regarding plan of care.', 'Social work following for disposition.', 'Note entered in error.'))} Contact {self.phi(when)}."),
        ]

    def text(self, note_type: CanonicalNoteType, when: date) -> str:
        return "\n".join(f"{header}:\n{body}" for header, body in self.sections(note_type, when))


def _patient_records(spec: SyntheticCorpusSpec, p: int, fallback: CanonicalNoteType) -> list[RawNoteRecord]:
    rng = np.random.default_rng([spec.seed, p])
    subject_id = 10000 + p
    n_visits = int(rng.integers(spec.min_visits, spec.max_visits + 1))
    ci = int(rng.integers(len(CONDITIONS)))
    co = (ci + 1 + int(rng.integers(len(CONDITIONS) - 1))) % len(CONDITIONS)
    writer = _Writer(rng, CONDITIONS[ci], CONDITIONS[co])
    when = spec.start_date + timedelta(days=int(rng.integers(0, 3650)))
    out = []
    for v in range(n_visits):
        if v:
            when = when + timedelta(days=int(rng.integers(7, 181)))
        hadm_id = subject_id * 1000 + v + 1
        stay = int(rng.integers(1, 8))
        chosen = [t for t in NOTE_TYPES if rng.random() < spec.probability(t)]
        if not chosen:
            chosen = [fallback]
        for t in chosen:
            day = when + timedelta(days=int(rng.integers(0, stay)))
            charttime = datetime.combine(day, time(int(rng.integers(0, 24)), int(rng.integers(0, 60))))
            category, description = writer.pick(LABELS[t])
            out.append(
                RawNoteRecord(
                    row_id=0,
                    subject_id=subject_id,
                    hadm_id=hadm_id,
                    chartdate=day,
                    charttime=charttime,
                    category=category,
                    description=description,
                    text=writer.text(t, day),
                )
            )
    return out


def generate_synthetic_corpus(spec: SyntheticCorpusSpec) -> list[RawNoteRecord]:
    """Deterministic corpus; each patient draws from its own ``(seed, patient)`` stream."""
    fallback = max(NOTE_TYPES, key=lambda t: (spec.probability(t), t.value))
    records = []
    for p in range(spec.patient_count):
        records.extend(_patient_records(spec, p, fallback))
    return [
        RawNoteRecord(i + 1, r.subject_id, r.hadm_id, r.chartdate, r.charttime, r.category, r.description, r.text)
        for i, r in enumerate(records)
    ]


def observed_coverage(records: list[RawNoteRecord], note_type_of) -> dict[CanonicalNoteType, float]:
    """Fraction of visits containing each type, with ``note_type_of`` classifying a record."""
    visits: dict[tuple[int, int], set[CanonicalNoteType]] = {}
    for r in records:
        visits.setdefault((r.subject_id, r.hadm_id), set()).add(note_type_of(r))
    n = len(visits)
    return {t: sum(t in types for types in visits.values()) / n for t in NOTE_TYPES} if n else {}
