"""Synthetic desk-scale corpus: records plus QA/report annotations.

Each patient gets one record drawn from a seeded parameter distribution.
Annotations derive from the generating parameters, so answers are exact:

* verify: does the signal contain an anomalous segment? (yes/no)
* choose: which waves are prominent, "p wave" / "t wave" / "none"
  (thresholds on the generating amplitudes)
* query:  the rhythm category from the heart rate (bradycardia < 60,
  tachycardia > 100, sinus rhythm otherwise)
* report: a short template combining rhythm, rate, wave prominence, and the
  anomaly flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .prompts import QaItem, TaskRecord
from .signals import EcgRecord, PatientMeta, SyntheticSpec, generate_synthetic

P_PROMINENT = 0.22
T_PROMINENT = 0.45

VERIFY_QUESTION = "Does this ECG show an anomalous segment?"
CHOOSE_QUESTION = "Which waves are prominent in this ECG, p wave or t wave?"
QUERY_QUESTION = "What rhythm does this ECG show?"
CHOOSE_OPTIONS = ["p wave", "t wave"]


@dataclass
class SyntheticCorpus:
    records: list[EcgRecord]
    tasks: list[TaskRecord]
    specs: dict[str, SyntheticSpec] = field(default_factory=dict)

    def tasks_for(self, record_ids: set[str]) -> list[TaskRecord]:
        return [t for t in self.tasks if t.record_id in record_ids]


def rhythm_label(heart_rate: float) -> str:
    if heart_rate < 60:
        return "sinus bradycardia"
    if heart_rate > 100:
        return "sinus tachycardia"
    return "sinus rhythm"


def prominent_waves(spec: SyntheticSpec) -> str:
    found = []
    if spec.p_amplitude > P_PROMINENT:
        found.append("p wave")
    if spec.t_amplitude > T_PROMINENT:
        found.append("t wave")
    return ", ".join(found) if found else "none"


def report_text(spec: SyntheticSpec) -> str:
    rate = int(round(spec.heart_rate / 5.0) * 5)
    parts = [f"{rhythm_label(spec.heart_rate)} at about {rate} bpm."]
    waves = prominent_waves(spec)
    if waves == "none":
        parts.append("no prominent waves.")
    else:
        parts.append(f"prominent {waves}.")
    if spec.anomaly_window is not None:
        parts.append("an anomalous segment is present.")
    else:
        parts.append("no anomalous segment.")
    return " ".join(parts)


def tasks_for_spec(record_id: str, spec: SyntheticSpec) -> list[TaskRecord]:
    return [
        TaskRecord(record_id, "qa", qa=QaItem(
            question=VERIFY_QUESTION, qtype="verify",
            answer="yes" if spec.anomaly_window else "no")),
        TaskRecord(record_id, "qa", qa=QaItem(
            question=CHOOSE_QUESTION, qtype="choose",
            options=list(CHOOSE_OPTIONS), answer=prominent_waves(spec))),
        TaskRecord(record_id, "qa", qa=QaItem(
            question=QUERY_QUESTION, qtype="query",
            answer=rhythm_label(spec.heart_rate))),
        TaskRecord(record_id, "report", report=report_text(spec)),
    ]


def _random_meta(pid: str, rng: np.random.Generator) -> PatientMeta:
    sexes = ("female", "male")
    sites = ("ward a", "ward b", "clinic")
    return PatientMeta(
        patient_id=pid,
        age=int(rng.integers(25, 90)),
        sex=sexes[int(rng.integers(0, 2))],
        height=float(np.round(rng.uniform(150, 195), 0)),
        weight=float(np.round(rng.uniform(50, 110), 0)),
        recording_date=f"2024-{int(rng.integers(1, 13)):02d}-{int(rng.integers(1, 29)):02d}",
        nurse_id=None if rng.uniform() < 0.3 else f"n{int(rng.integers(1, 20)):03d}",
        device_id=f"dev{int(rng.integers(1, 6)):02d}",
        site=sites[int(rng.integers(0, 3))],
    )


def build_synthetic_corpus(n_patients: int, timesteps: int = 128,
                           sampling_rate: float = 32.0, seed: int = 0,
                           anomaly_fraction: float = 0.5,
                           anomaly_window: tuple[int, int] | None = None,
                           noise_std: float = 0.02) -> SyntheticCorpus:
    """One record per patient with seeded parameter diversity; about
    ``anomaly_fraction`` of records carry the morphology perturbation."""
    rng = np.random.default_rng(seed)
    if anomaly_window is None:
        anomaly_window = (int(timesteps * 0.4), int(timesteps * 0.75))
    records: list[EcgRecord] = []
    tasks: list[TaskRecord] = []
    specs: dict[str, SyntheticSpec] = {}
    for i in range(n_patients):
        pid = f"p{i:04d}"
        rid = f"rec{i:04d}"
        anomalous = rng.uniform() < anomaly_fraction
        spec = SyntheticSpec(
            heart_rate=float(np.round(rng.uniform(48, 115), 1)),
            p_amplitude=float(np.round(rng.uniform(0.08, 0.35), 3)),
            qrs_amplitude=float(np.round(rng.uniform(0.8, 1.2), 3)),
            t_amplitude=float(np.round(rng.uniform(0.2, 0.65), 3)),
            noise_std=noise_std,
            anomaly_window=anomaly_window if anomalous else None,
            seed=int(rng.integers(0, 2**31 - 1)),
            timesteps=timesteps,
            sampling_rate=sampling_rate,
            record_id=rid,
            patient=_random_meta(pid, rng),
        )
        records.append(generate_synthetic(spec))
        tasks.extend(tasks_for_spec(rid, spec))
        specs[rid] = spec
    return SyntheticCorpus(records=records, tasks=tasks, specs=specs)
