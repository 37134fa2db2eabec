"""ECG record model, normalization, synthetic signals, file IO, splitting.

Records hold a (leads x timesteps) float64 matrix plus patient metadata.
The synthetic generator is the desk-scale data source: per beat it places
three Gaussian bumps (P, a tall narrow QRS, T) on a circular beat phase, so
a noise-free record is exactly periodic, then scales them with fixed
per-lead coefficients and adds seeded white noise. An optional anomaly
window injects a deterministic morphology perturbation strictly inside the
window.

Two file formats are supported: a CSV (one row per timestep, one column per
lead, optional header, key=value sidecar ``.meta`` for metadata) and a
binary format (magic "ECGR", version u16, leads u16, timesteps u32,
sampling rate f32, then little-endian f32 samples lead-major).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DEFAULT_LEADS = 12
DEFAULT_TIMESTEPS = 5000

ECGR_MAGIC = b"ECGR"
ECGR_VERSION = 1

MISSING = "unknown"

META_FIELDS = ("patient_id", "age", "sex", "height", "weight",
               "recording_date", "nurse_id", "device_id", "site")


class SignalError(ValueError):
    """Invalid signal input (shape, values, or file contents)."""


class MissingValueError(SignalError):
    """A record contains missing values and is rejected."""


@dataclass
class PatientMeta:
    patient_id: str
    age: int | None = None
    sex: str | None = None
    height: float | None = None
    weight: float | None = None
    recording_date: str | None = None
    nurse_id: str | None = None
    device_id: str | None = None
    site: str | None = None

    def __post_init__(self):
        if not self.patient_id:
            raise SignalError("patient_id must be non-empty")


@dataclass
class EcgRecord:
    samples: np.ndarray          # (leads, timesteps)
    sampling_rate: float
    record_id: str
    patient: PatientMeta

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise SignalError(f"samples must be 2-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise MissingValueError(f"record {self.record_id} contains missing values")

    @property
    def leads(self) -> int:
        return self.samples.shape[0]

    @property
    def timesteps(self) -> int:
        return self.samples.shape[1]


@dataclass
class SyntheticSpec:
    """Parameters of one synthetic record. Amplitudes are relative units."""
    heart_rate: float = 72.0
    p_amplitude: float = 0.15
    qrs_amplitude: float = 1.0
    t_amplitude: float = 0.3
    noise_std: float = 0.02
    anomaly_window: tuple[int, int] | None = None
    seed: int = 0
    timesteps: int = DEFAULT_TIMESTEPS
    sampling_rate: float = 500.0
    leads: int = DEFAULT_LEADS
    record_id: str | None = None
    patient: PatientMeta | None = None

    def __post_init__(self):
        if self.heart_rate <= 0:
            raise SignalError("heart_rate must be positive")
        if self.anomaly_window is not None:
            lo, hi = self.anomaly_window
            if not (0 <= lo < hi <= self.timesteps):
                raise SignalError(f"anomaly_window {self.anomaly_window} outside signal")


def z_normalize(lead: np.ndarray) -> np.ndarray:
    """Zero-mean, unit population-std per lead; constant leads map to zeros
    via the epsilon guard in the denominator."""
    x = np.asarray(lead, dtype=np.float64)
    if x.size == 0:
        raise SignalError("cannot normalize an empty sequence")
    return (x - x.mean()) / (x.std() + 1e-8)


# Relative strength of (P, QRS, T) per lead; fixed so leads are distinct but
# correlated, loosely shaped like the limb/precordial progression.
_LEAD_COEFFS = np.array([
    [1.00, 1.00, 1.00],
    [1.10, 1.15, 1.10],
    [0.40, 0.55, 0.50],
    [-0.9, -1.0, -0.9],
    [0.65, 0.50, 0.55],
    [0.90, 0.95, 0.95],
    [0.30, -0.6, 0.20],
    [0.45, 0.80, 0.60],
    [0.60, 1.30, 0.90],
    [0.70, 1.50, 1.10],
    [0.75, 1.30, 1.05],
    [0.80, 1.10, 1.00],
])


def _beat_template(period: int, spec: SyntheticSpec) -> np.ndarray:
    """One beat of the three-bump morphology per component, on a circular
    phase axis so tiling the template is exactly periodic.

    Returns an array (3, period): separate P, QRS, T traces.
    """
    phase = np.arange(period) / period
    # bump centers and widths as beat-phase fractions
    centers = np.array([0.18, 0.32, 0.55])     # P, QRS, T
    widths = np.array([0.035, 0.012, 0.060])
    amps = np.array([spec.p_amplitude, spec.qrs_amplitude, spec.t_amplitude])
    # circular distance keeps bumps continuous across the beat boundary
    d = np.abs(phase[None, :] - centers[:, None])
    d = np.minimum(d, 1.0 - d)
    return amps[:, None] * np.exp(-0.5 * (d / widths[:, None]) ** 2)


def generate_synthetic(spec: SyntheticSpec) -> EcgRecord:
    """Deterministic pseudo-ECG from the spec; identical seeds are
    bit-reproducible. The anomaly perturbation is noise-independent, so a
    record differs from its no-anomaly twin only inside the window."""
    period = int(round(60.0 * spec.sampling_rate / spec.heart_rate))
    period = max(period, 4)
    components = _beat_template(period, spec)            # (3, period)
    reps = spec.timesteps // period + 2
    tiled = np.tile(components, (1, reps))[:, : spec.timesteps]   # (3, T)

    coeffs = _LEAD_COEFFS[np.arange(spec.leads) % len(_LEAD_COEFFS)]
    clean = coeffs @ tiled                                # (leads, T)

    rng = np.random.default_rng(spec.seed)
    samples = clean
    if spec.noise_std > 0:
        samples = samples + rng.normal(0.0, spec.noise_std, size=clean.shape)

    if spec.anomaly_window is not None:
        # high-frequency burst, then per-lead moment matching inside the
        # window so the lead-wide mean and energy stay exactly those of the
        # clean record: z-normalization then leaves everything outside the
        # window untouched and the anomaly stays a purely local feature
        lo, hi = spec.anomaly_window
        t = np.arange(lo, hi)
        cycles = max((hi - lo) / 5.0, 2.0)
        burst = 1.2 * spec.qrs_amplitude * np.sin(
            2.0 * np.pi * cycles * (t - lo) / max(hi - lo, 1))
        samples = samples.copy()
        clean_win = samples[:, lo:hi]
        perturbed = clean_win + coeffs[:, 1:2] * burst[None, :]
        w_mean = clean_win.mean(axis=1, keepdims=True)
        w_sd = clean_win.std(axis=1, keepdims=True)
        p_mean = perturbed.mean(axis=1, keepdims=True)
        p_sd = perturbed.std(axis=1, keepdims=True)
        samples[:, lo:hi] = (perturbed - p_mean) * (w_sd / (p_sd + 1e-12)) + w_mean

    rid = spec.record_id or f"synth-{spec.seed:08d}"
    patient = spec.patient or PatientMeta(patient_id=f"pat-{spec.seed:08d}")
    return EcgRecord(samples=samples, sampling_rate=spec.sampling_rate,
                     record_id=rid, patient=patient)


# ---- file formats ----------------------------------------------------------


def _meta_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".meta")


def _write_sidecar(record: EcgRecord, path: Path) -> None:
    lines = [f"record_id={record.record_id}", f"sampling_rate={record.sampling_rate!r}"]
    for name in META_FIELDS:
        value = getattr(record.patient, name)
        if value is not None:
            lines.append(f"{name}={value}")
    _meta_path(path).write_text("\n".join(lines) + "\n")


def _read_sidecar(path: Path) -> dict[str, str]:
    mp = _meta_path(path)
    if not mp.exists():
        return {}
    pairs: dict[str, str] = {}
    for line in mp.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def _patient_from_pairs(pairs: dict[str, str], fallback_id: str) -> PatientMeta:
    def num(key, cast):
        return cast(pairs[key]) if key in pairs else None

    return PatientMeta(
        patient_id=pairs.get("patient_id", fallback_id),
        age=num("age", lambda v: int(float(v))),
        sex=pairs.get("sex"),
        height=num("height", float),
        weight=num("weight", float),
        recording_date=pairs.get("recording_date"),
        nurse_id=pairs.get("nurse_id"),
        device_id=pairs.get("device_id"),
        site=pairs.get("site"),
    )


def save_record_csv(record: EcgRecord, path: str | Path, header: bool = True) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        if header:
            fh.write(",".join(f"lead_{i + 1}" for i in range(record.leads)) + "\n")
        for row in record.samples.T:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    _write_sidecar(record, path)


def save_record_binary(record: EcgRecord, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(ECGR_MAGIC)
        fh.write(struct.pack("<HHI f", ECGR_VERSION, record.leads,
                             record.timesteps, record.sampling_rate))
        fh.write(np.ascontiguousarray(record.samples, dtype="<f4").tobytes())
    _write_sidecar(record, path)


def load_record(path: str | Path, format: str | None = None,
                leads: int = DEFAULT_LEADS) -> EcgRecord:
    """Load a record; rejects files with missing values or a lead count
    other than ``leads``. Format is inferred from the extension when not
    given ('csv' or 'ecgr' binary)."""
    path = Path(path)
    if not path.exists():
        raise SignalError(f"no such record file: {path}")
    if format is None:
        format = "ecgr" if path.suffix == ".ecgr" else "csv"
    if format == "csv":
        record = _load_csv(path, leads)
    elif format in ("ecgr", "binary"):
        record = _load_binary(path, leads)
    else:
        raise SignalError(f"unsupported record format: {format!r}")
    return record


def _load_csv(path: Path, leads: int) -> EcgRecord:
    rows: list[list[str]] = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(line.split(","))
    if not rows:
        raise SignalError(f"empty record file: {path}")

    def is_number(cell: str) -> bool:
        try:
            float(cell)
            return True
        except ValueError:
            return False

    if not all(is_number(c) for c in rows[0]):
        rows = rows[1:]   # header row
    if not rows:
        raise SignalError(f"no sample rows in {path}")
    width = len(rows[0])
    if width != leads:
        raise SignalError(f"{path}: expected {leads} lead columns, found {width}")
    data = np.empty((len(rows), width), dtype=np.float64)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise SignalError(f"{path}: ragged row {i}")
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell == "" or cell.lower() in ("nan", "na"):
                raise MissingValueError(f"{path}: missing value at row {i}, column {j}")
            data[i, j] = float(cell)
    if not np.all(np.isfinite(data)):
        raise MissingValueError(f"{path}: non-finite sample value")
    pairs = _read_sidecar(path)
    sampling_rate = float(pairs.get("sampling_rate", 500.0))
    record_id = pairs.get("record_id", path.stem)
    return EcgRecord(samples=data.T.copy(), sampling_rate=sampling_rate,
                     record_id=record_id,
                     patient=_patient_from_pairs(pairs, record_id))


def _load_binary(path: Path, leads: int) -> EcgRecord:
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != ECGR_MAGIC:
        raise SignalError(f"{path}: not an ECGR file (bad magic)")
    if len(raw) < 16:
        raise SignalError(f"{path}: truncated header")
    version, n_leads, n_steps, fs = struct.unpack("<HHI f", raw[4:16])
    if version != ECGR_VERSION:
        raise SignalError(f"{path}: unsupported version {version}")
    if n_leads != leads:
        raise SignalError(f"{path}: expected {leads} leads, found {n_leads}")
    need = 16 + 4 * n_leads * n_steps
    if len(raw) < need:
        raise SignalError(f"{path}: truncated sample data")
    data = np.frombuffer(raw[16:need], dtype="<f4").astype(np.float64)
    data = data.reshape(n_leads, n_steps)
    if not np.all(np.isfinite(data)):
        raise MissingValueError(f"{path}: non-finite sample value")
    pairs = _read_sidecar(path)
    record_id = pairs.get("record_id", path.stem)
    return EcgRecord(samples=data, sampling_rate=float(pairs.get("sampling_rate", fs)),
                     record_id=record_id,
                     patient=_patient_from_pairs(pairs, record_id))


# ---- splitting --------------------------------------------------------------


@dataclass
class SplitAssignment:
    by_record: dict[str, str] = field(default_factory=dict)
    by_patient: dict[str, str] = field(default_factory=dict)

    def records(self, split: str) -> list[str]:
        return sorted(rid for rid, s in self.by_record.items() if s == split)


def split_by_patient(records: list[EcgRecord], ratios: tuple[int, int, int] = (7, 1, 2),
                     seed: int = 0) -> SplitAssignment:
    """Shuffle patients (not records) deterministically and partition them as
    close to ``ratios`` as integer counts allow; remainder patients go to
    train. Every record of a patient lands in the same split."""
    patients = sorted({r.patient.patient_id for r in records})
    if len(patients) < 3:
        raise SignalError(f"need at least 3 patients to split, got {len(patients)}")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(patients))
    total = sum(ratios)
    n = len(order)
    n_val = n * ratios[1] // total
    n_test = n * ratios[2] // total
    n_train = n - n_val - n_test
    assignment = SplitAssignment()
    for i, pid in enumerate(order):
        if i < n_train:
            split = "train"
        elif i < n_train + n_val:
            split = "val"
        else:
            split = "test"
        assignment.by_patient[pid] = split
    for r in records:
        assignment.by_record[r.record_id] = assignment.by_patient[r.patient.patient_id]
    return assignment


def save_split(assignment: SplitAssignment, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{rid},{split}" for rid, split in sorted(assignment.by_record.items())]
    path.write_text("\n".join(lines) + "\n")


def load_split(path: str | Path, records: list[EcgRecord]) -> SplitAssignment:
    by_id = {r.record_id: r for r in records}
    assignment = SplitAssignment()
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        rid, split = line.rsplit(",", 1)
        assignment.by_record[rid] = split
        if rid in by_id:
            assignment.by_patient[by_id[rid].patient.patient_id] = split
    return assignment


def with_anomaly(spec: SyntheticSpec, window: tuple[int, int]) -> SyntheticSpec:
    return replace(spec, anomaly_window=window)
