"""Trials, manifests, synthetic cohorts with planted laterality, patient-level splits."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import SENSORS

log = logging.getLogger(__name__)

CHANNELS = ("acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z", "facc_x", "facc_y", "facc_z")
COLUMNS = tuple(f"{s}_{c}" for s in SENSORS for c in CHANNELS)
SAMPLE_RATE = 100.0
MIN_LENGTH = 8


class TrialParseError(ValueError):
    def __init__(self, path, message: str, row: int | None = None, column: int | None = None):
        loc = ""
        if row is not None:
            loc += f" row {row}"
        if column is not None:
            loc += f" column {column}"
        super().__init__(f"{path}:{loc}: {message}" if loc else f"{path}: {message}")
        self.path = str(path)
        self.row = row
        self.column = column


class TrialTooShortError(ValueError):
    pass


@dataclass
class SensorTrial:
    trial_id: str
    patient_id: str
    label: int
    cohort: str
    signal: np.ndarray  # (4, 9, T), sensor order HE, LB, LF, RF
    sample_rate: float = SAMPLE_RATE

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=np.float64)
        if self.signal.ndim != 3 or self.signal.shape[:2] != (len(SENSORS), len(CHANNELS)):
            raise ValueError(f"signal must be ({len(SENSORS)}, {len(CHANNELS)}, T), got {self.signal.shape}")
        if self.signal.shape[2] < MIN_LENGTH:
            raise TrialTooShortError(f"trial {self.trial_id}: T={self.signal.shape[2]} < {MIN_LENGTH}")
        if not np.all(np.isfinite(self.signal)):
            raise ValueError(f"trial {self.trial_id}: non-finite samples")
        if self.label not in (0, 1):
            raise ValueError(f"trial {self.trial_id}: label must be 0 or 1")


@dataclass
class TrialEntry:
    trial_id: str
    patient_id: str
    label: int
    cohort: str
    path: str


@dataclass
class Manifest:
    task: str
    trials: list[TrialEntry]
    sensors: list[str] = field(default_factory=lambda: list(SENSORS))
    channels: list[str] = field(default_factory=lambda: list(CHANNELS))
    root: Path | None = None  # directory relative paths resolve against; not serialised

    def __post_init__(self):
        ids = [t.trial_id for t in self.trials]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate trial_id in manifest")

    def patients(self) -> dict[str, int]:
        """patient_id -> label (a patient's trials share one label)."""
        out: dict[str, int] = {}
        for t in self.trials:
            if out.setdefault(t.patient_id, t.label) != t.label:
                raise ValueError(f"patient {t.patient_id} has trials with conflicting labels")
        return out

    def resolve(self, entry: TrialEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def to_json(self) -> str:
        d = {
            "task": self.task,
            "sensors": self.sensors,
            "channels": self.channels,
            "trials": [asdict(t) for t in self.trials],
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        d = json.loads(path.read_text(encoding="utf-8"))
        if list(d.get("sensors", SENSORS)) != list(SENSORS):
            raise ValueError(f"{path}: sensor layout {d.get('sensors')} != {list(SENSORS)}")
        trials = [TrialEntry(**t) for t in d["trials"]]
        return cls(task=d["task"], trials=trials, sensors=d["sensors"], channels=d["channels"], root=path.parent)

    def load_trials(self, entries: list[TrialEntry] | None = None) -> list[SensorTrial]:
        return [load_trial(self.resolve(e), e) for e in (self.trials if entries is None else entries)]


# ---------------------------------------------------------------- trial CSV


def write_trial(trial: SensorTrial, path) -> None:
    flat = trial.signal.reshape(len(COLUMNS), -1)
    lines = ["t," + ",".join(COLUMNS)]
    for i in range(flat.shape[1]):
        lines.append(str(i) + "," + ",".join(format(v, ".17g") for v in flat[:, i]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_trial(path, entry: TrialEntry | None = None) -> SensorTrial:
    """Parse a trial CSV. Metadata comes from the manifest entry when given."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise TrialParseError(path, "empty file", row=1)
    header = lines[0].split(",")
    n_data = len(COLUMNS)
    if len(header) - 1 != n_data:
        raise TrialParseError(path, f"expected {n_data} data columns, found {len(header) - 1}", row=1)
    if header[0] != "t" or tuple(header[1:]) != COLUMNS:
        bad = next(i for i, (a, b) in enumerate(zip(header, ("t",) + COLUMNS)) if a != b)
        raise TrialParseError(path, f"malformed header: expected {(('t',) + COLUMNS)[bad]!r}, got {header[bad]!r}",
                              row=1, column=bad + 1)
    body = [ln for ln in lines[1:] if ln.strip()]
    if not body:
        raise TrialTooShortError(f"{path}: no samples")
    data = np.empty((len(body), n_data))
    for r, ln in enumerate(body):
        cells = ln.split(",")
        if len(cells) - 1 != n_data:
            raise TrialParseError(path, f"expected {n_data} data columns, found {len(cells) - 1}", row=r + 2)
        for c, cell in enumerate(cells[1:]):
            try:
                v = float(cell)
            except ValueError:
                raise TrialParseError(path, f"non-numeric cell {cell!r}", row=r + 2, column=c + 2) from None
            if not math.isfinite(v):
                raise TrialParseError(path, f"non-finite value {cell!r}", row=r + 2, column=c + 2)
            data[r, c] = v
    if len(body) < MIN_LENGTH:
        raise TrialTooShortError(f"{path}: {len(body)} samples < minimum {MIN_LENGTH}")
    signal = data.T.reshape(len(SENSORS), len(CHANNELS), len(body))
    if entry is None:
        return SensorTrial(trial_id=path.stem, patient_id="", label=0, cohort="", signal=signal)
    return SensorTrial(entry.trial_id, entry.patient_id, int(entry.label), entry.cohort, signal)


# ---------------------------------------------------------------- synthetic cohort

ANOMALY_KINDS = ("amplitude_drop", "variability_boost", "axial_tremor")
# which sensors each anomaly touches; "foot" means the per-patient drawn side
ANOMALY_SENSORS = {"amplitude_drop": ("foot",), "variability_boost": ("foot",), "axial_tremor": ("HE",)}
SENSOR_GAIN = {"HE": 0.25, "LB": 0.5, "LF": 1.0, "RF": 1.0}


@dataclass
class SynthConfig:
    n_controls: int = 30
    n_patients: int = 30
    trials_per_patient: int = 4
    T: int = 512
    laterality_fraction_right: float = 1.0
    anomaly: str = "amplitude_drop"
    anomaly_strength: float = 0.8
    gait_freq: float = 1.0
    freq_jitter: float = 0.08
    n_harmonics: int = 3
    noise_std: float = 0.3
    noise_scales_with_gain: bool = False  # noise std multiplied by the sensor's gait gain
    subject_spread: float = 0.3  # per-subject harmonic amplitudes ~ U(1 - spread, 1 + spread)
    task: str = "synthetic"
    seed: int = 0

    def __post_init__(self):
        if self.n_controls < 1 or self.n_patients < 1:
            raise ValueError("n_controls and n_patients must both be >= 1")
        if self.trials_per_patient < 1:
            raise ValueError("trials_per_patient must be >= 1")
        if self.T < MIN_LENGTH:
            raise ValueError(f"T must be >= {MIN_LENGTH}")
        if not 0.0 <= self.laterality_fraction_right <= 1.0:
            raise ValueError("laterality_fraction_right must be in [0, 1]")
        if self.anomaly not in ANOMALY_KINDS:
            raise ValueError(f"anomaly must be one of {ANOMALY_KINDS}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0.0 <= self.subject_spread < 1.0:
            raise ValueError("subject_spread must be in [0, 1)")


def _smooth_noise(rng: np.random.Generator, T: int, scale: float) -> np.ndarray:
    # low-pass random walk, zero mean, unit-ish std
    w = np.cumsum(rng.normal(size=T)) / np.sqrt(T)
    return scale * (w - w.mean())


def synth_signal(cfg: SynthConfig, rng: np.random.Generator, patient: dict) -> np.ndarray:
    """One trial for one subject. ``patient`` carries per-subject draws."""
    T = cfg.T
    t = np.arange(T) / SAMPLE_RATE
    f0 = patient["freq"] * (1.0 + 0.02 * rng.normal())
    sig = np.empty((len(SENSORS), len(CHANNELS), T))
    side = patient.get("side")
    kind = cfg.anomaly if patient["label"] == 1 else None
    for s, name in enumerate(SENSORS):
        gain = SENSOR_GAIN[name]
        foot_hit = kind is not None and ANOMALY_SENSORS[kind] == ("foot",) and name == side
        phase_track = 2 * np.pi * f0 * t
        if foot_hit and kind == "variability_boost":
            phase_track = phase_track + _smooth_noise(rng, T, 6.0 * cfg.anomaly_strength)
        for c in range(len(CHANNELS)):
            amps = patient["amps"][s, c]
            x = np.zeros(T)
            for h in range(cfg.n_harmonics):
                x += amps[h] * np.sin((h + 1) * phase_track + rng.uniform(0, 2 * np.pi))
            x *= gain
            if foot_hit and kind == "amplitude_drop":
                x *= 1.0 - cfg.anomaly_strength
            x += cfg.noise_std * (gain if cfg.noise_scales_with_gain else 1.0) * rng.normal(size=T)
            sig[s, c] = x
    if kind == "axial_tremor":
        ftr = patient["tremor_freq"]
        for c in range(len(CHANNELS)):
            sig[0, c] += cfg.anomaly_strength * SENSOR_GAIN["HE"] * np.sin(2 * np.pi * ftr * t + rng.uniform(0, 2 * np.pi))
    return sig


def generate_cohort(cfg: SynthConfig) -> list[SensorTrial]:
    """All trials for the configured cohort, fully determined by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    n_right = int(round(cfg.laterality_fraction_right * cfg.n_patients))
    sides = np.array(["RF"] * n_right + ["LF"] * (cfg.n_patients - n_right))
    sides = sides[rng.permutation(cfg.n_patients)]
    subjects = []
    for i in range(cfg.n_controls):
        subjects.append({"id": f"HS{i:03d}", "label": 0, "cohort": "HS", "side": None})
    for i in range(cfg.n_patients):
        subjects.append({"id": f"PT{i:03d}", "label": 1, "cohort": "PT", "side": str(sides[i])})
    trials = []
    for subj in subjects:
        subj["freq"] = cfg.gait_freq * (1.0 + cfg.freq_jitter * rng.normal())
        subj["amps"] = rng.uniform(1.0 - cfg.subject_spread, 1.0 + cfg.subject_spread, size=(len(SENSORS), len(CHANNELS), cfg.n_harmonics)) / np.arange(
            1, cfg.n_harmonics + 1)
        subj["tremor_freq"] = rng.uniform(4.0, 6.0)
        for k in range(cfg.trials_per_patient):
            sig = synth_signal(cfg, rng, subj)
            trials.append(SensorTrial(f"{subj['id']}_T{k:02d}", subj["id"], subj["label"], subj["cohort"], sig))
    return trials


def generate_synthetic(cfg: SynthConfig, out_dir) -> Manifest:
    out_dir = Path(out_dir)
    (out_dir / "trials").mkdir(parents=True, exist_ok=True)
    entries = []
    for tr in generate_cohort(cfg):
        rel = f"trials/{tr.trial_id}.csv"
        write_trial(tr, out_dir / rel)
        entries.append(TrialEntry(tr.trial_id, tr.patient_id, tr.label, tr.cohort, rel))
    manifest = Manifest(task=cfg.task, trials=entries, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------- splitting


@dataclass
class SplitManifest:
    seed: int
    ratios: tuple[float, float, float]
    train: list[str]
    val: list[str]
    test: list[str]
    stratified: bool = True
    warnings: list[str] = field(default_factory=list)

    def split_of(self, name: str) -> list[str]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def trials(self, manifest: Manifest, name: str) -> list[TrialEntry]:
        ids = set(self.split_of(name))
        return [t for t in manifest.trials if t.patient_id in ids]

    def to_json(self) -> str:
        d = {"seed": self.seed, "ratios": list(self.ratios), "train": self.train, "val": self.val,
             "test": self.test, "stratified": self.stratified, "warnings": self.warnings}
        return json.dumps(d, indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(seed=d["seed"], ratios=tuple(d["ratios"]), train=d["train"], val=d["val"], test=d["test"],
                   stratified=d.get("stratified", True), warnings=d.get("warnings", []))


def largest_remainder(n: int, ratios, target: list[int] | None = None) -> list[int]:
    """Round n*ratios to integers summing to n.

    Leftover units go to the largest fractional parts; ties prefer the split
    furthest below ``target`` (if given), then the earlier split.
    """
    quotas = [n * r for r in ratios]
    counts = [math.floor(q + 1e-9) for q in quotas]
    rema = [q - c for q, c in zip(quotas, counts)]
    left = n - sum(counts)
    deficit = [0] * len(ratios) if target is None else [target[i] - counts[i] for i in range(len(ratios))]
    order = sorted(range(len(ratios)), key=lambda i: (-round(rema[i], 9), -deficit[i], i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def _stratified_counts(n0: int, n1: int, target: list[int], ratios) -> tuple[list[int], list[int], bool]:
    """Per-class split counts whose column sums equal ``target``.

    Minimises L1 distance to each class's exact quota. Prefers solutions giving
    every split at least one patient of each class whose size is >= 3; returns
    whether that preference could be met. Ties go to the first candidate in
    (train desc, val desc) order for class 0.
    """
    q0 = [n0 * r for r in ratios]
    q1 = [n1 * r for r in ratios]
    best = {True: None, False: None}
    for a in range(min(n0, target[0]), -1, -1):
        for b in range(min(n0 - a, target[1]), -1, -1):
            c0 = [a, b, n0 - a - b]
            c1 = [target[k] - c0[k] for k in range(3)]
            if c0[2] > target[2] or min(c1) < 0:
                continue
            cost = sum(abs(c0[k] - q0[k]) + abs(c1[k] - q1[k]) for k in range(3))
            ok = (n0 < 3 or min(c0) >= 1) and (n1 < 3 or min(c1) >= 1)
            for key in ((True, False) if ok else (False,)):
                if best[key] is None or cost < best[key][0] - 1e-9:
                    best[key] = (cost, c0, c1)
    key = best[True] is not None
    _, c0, c1 = best[key]
    return c0, c1, key


def split_patients(manifest: Manifest, ratios=(0.70, 0.15, 0.15), seed: int = 0,
                   stratify: bool = True) -> SplitManifest:
    """Patient-level split. Split sizes are the largest-remainder rounding of the totals.

    Stratified mode shuffles each class separately and divides it so that split
    totals still match the unstratified sizes.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    patients = manifest.patients()
    labels = sorted(set(patients.values()))
    if stratify and labels != [0, 1]:
        raise ValueError("stratified split needs at least one patient of each class")
    rng = np.random.default_rng(seed)
    groups = [[p for p in sorted(patients) if patients[p] == lab] for lab in labels] if stratify else [sorted(patients)]
    target = largest_remainder(len(patients), ratios)
    warnings: list[str] = []
    if stratify:
        c0, c1, ok = _stratified_counts(len(groups[0]), len(groups[1]), target, ratios)
        counts = [c0, c1]
        for lab, c in zip(labels, counts):
            empty = [("train", "val", "test")[k] for k in range(3) if c[k] == 0]
            if empty:
                msg = f"class {lab} has {sum(c)} patient(s); split(s) {empty} get none of it"
                warnings.append(msg)
                log.warning(msg)
    else:
        counts = [target]
    buckets: list[list[str]] = [[], [], []]
    for group, c in zip(groups, counts):
        order = [group[i] for i in rng.permutation(len(group))]
        pos = 0
        for k in range(3):
            buckets[k].extend(order[pos:pos + c[k]])
            pos += c[k]
    for k, name in enumerate(("train", "val", "test")):
        if not buckets[k]:
            msg = f"split {name} is empty"
            warnings.append(msg)
            log.warning(msg)
    return SplitManifest(seed=seed, ratios=tuple(ratios), train=sorted(buckets[0]), val=sorted(buckets[1]),
                         test=sorted(buckets[2]), stratified=stratify, warnings=warnings)


def cohens_d(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = len(a), len(b)
    pooled = np.sqrt(((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2))
    return float((a.mean() - b.mean()) / pooled)


def trial_variance(trial: SensorTrial, sensor: str) -> float:
    """Mean per-channel variance of one sensor's raw signal."""
    return float(trial.signal[SENSORS.index(sensor)].var(axis=-1).mean())
