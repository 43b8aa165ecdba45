"""Deterministic synthetic ECG recordings and the segment dataset built from them.

Each beat is a sum of five Gaussian waves (P, Q, R, S, T).  A wave sits at
``t_R + offset / (2*pi) * RR`` so its timing scales with the beat interval.
Subjects differ by morphology, heart rate and variability; activities by
heart-rate multiplier, respiratory modulation and noise.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsp import Activity, DspConfig, EcgRecording, preprocess

DATASET_MAGIC = b"DTDS"
DATASET_VERSION = 1
WAVES = ("P", "Q", "R", "S", "T")

# Reference morphology: amplitude (mV), width (s), angular offset from R (rad).
_BASE_AMP = np.array([0.15, -0.15, 1.0, -0.25, 0.30])
_BASE_WIDTH = np.array([0.030, 0.012, 0.013, 0.014, 0.060])
_BASE_OFFSET = np.array([-np.pi / 3, -np.pi / 12, 0.0, np.pi / 12, np.pi / 2])


class DatasetFormatError(ValueError):
    pass


@dataclass
class SubjectProfile:
    subject_id: int
    amplitudes: np.ndarray
    widths: np.ndarray
    offsets: np.ndarray
    heart_rate: float
    hrv: float

    def vector(self) -> np.ndarray:
        return np.concatenate([self.amplitudes, self.widths, self.offsets, [self.heart_rate / 60.0, self.hrv]])


@dataclass
class ActivityModel:
    activity: Activity
    hr_multiplier: float
    resp_depth: float = 0.0
    resp_period: float = 10.0
    noise: float = 0.02

    def __post_init__(self):
        if self.hr_multiplier <= 0:
            raise ValueError("heart-rate multiplier must be positive")
        if not 0.0 <= self.resp_depth < 1.0:
            raise ValueError("respiratory modulation depth must lie in [0, 1)")


DEFAULT_ACTIVITIES = {
    Activity.REST: ActivityModel(Activity.REST, 1.0, 0.0, 10.0, 0.02),
    Activity.EXERCISE: ActivityModel(Activity.EXERCISE, 1.7, 0.0, 10.0, 0.03),
    Activity.DEEP_BREATHING: ActivityModel(Activity.DEEP_BREATHING, 0.95, 0.05, 10.0, 0.02),
}


@dataclass
class DatasetSpec:
    n_subjects: int = 15
    seconds: float = 180.0
    fs: float = 100.0
    seed: int = 0
    train_fraction: float = 0.7
    split_by: str = "segment"  # or "recording"
    min_profile_distance: float = 0.15

    def validate(self) -> None:
        if self.n_subjects < 1 or self.seconds <= 0 or self.fs <= 0:
            raise ValueError("dataset spec extents must be positive")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.split_by not in ("segment", "recording"):
            raise ValueError(f"split_by must be 'segment' or 'recording', got {self.split_by!r}")


def _draw_profile(rng: np.random.Generator, sid: int) -> SubjectProfile:
    amp = _BASE_AMP * rng.uniform(0.6, 1.4, 5)
    amp[2] = rng.uniform(0.8, 1.6)
    # keep R dominant
    others = np.abs(np.delete(amp, 2))
    if others.max() >= amp[2]:
        amp[[0, 1, 3, 4]] *= 0.9 * amp[2] / others.max()
    widths = _BASE_WIDTH * rng.uniform(0.75, 1.35, 5)
    offsets = _BASE_OFFSET + rng.normal(0.0, 0.06, 5) * np.array([1, 0.3, 0, 0.3, 1])
    return SubjectProfile(sid, amp, widths, offsets, float(rng.uniform(58, 82)), float(rng.uniform(0.01, 0.04)))


def make_profiles(spec: DatasetSpec) -> list[SubjectProfile]:
    """Seeded subject profiles, redrawn until all pairs are at least
    ``spec.min_profile_distance`` apart in parameter space."""
    rng = np.random.default_rng([spec.seed, 0xEC6])
    profiles: list[SubjectProfile] = []
    while len(profiles) < spec.n_subjects:
        cand = _draw_profile(rng, len(profiles))
        v = cand.vector()
        if all(np.linalg.norm(v - p.vector()) >= spec.min_profile_distance for p in profiles):
            profiles.append(cand)
    return profiles


def synthesize(profile: SubjectProfile, activity: ActivityModel, seconds: float, fs: float, seed,
               hrv: bool = True, noise: bool = True) -> EcgRecording:
    rng = np.random.default_rng(seed)
    n = int(round(seconds * fs))
    t = np.arange(n) / fs
    rr_mean = 60.0 / (profile.heart_rate * activity.hr_multiplier)
    resp_phase = rng.uniform(0, 2 * np.pi)

    # beat times, starting before t=0 so the first samples are populated
    beats = []
    tb = -rng.uniform(0, rr_mean) - rr_mean
    while tb < seconds + rr_mean:
        rr = rr_mean
        if activity.resp_depth:
            rr *= 1.0 + activity.resp_depth * np.sin(2 * np.pi * tb / activity.resp_period + resp_phase)
        if hrv:
            rr *= 1.0 + profile.hrv * rng.standard_normal()
        beats.append((tb, rr))
        tb += rr

    x = np.zeros(n)
    for tb, rr in beats:
        lo, hi = np.searchsorted(t, [tb - 0.6 * rr, tb + 0.6 * rr])
        if hi <= lo:
            continue
        seg = t[lo:hi]
        amp_mod = 1.0
        if activity.resp_depth:
            amp_mod = 1.0 + activity.resp_depth * np.sin(2 * np.pi * tb / activity.resp_period + resp_phase)
        for a, w, off in zip(profile.amplitudes, profile.widths, profile.offsets):
            centre = tb + off / (2 * np.pi) * rr
            x[lo:hi] += amp_mod * a * np.exp(-0.5 * ((seg - centre) / w) ** 2)

    if noise:
        wander_f = rng.uniform(0.05, 0.3, 2)
        wander = 0.1 * np.sin(2 * np.pi * wander_f[0] * t + rng.uniform(0, 2 * np.pi))
        wander += 0.05 * np.sin(2 * np.pi * wander_f[1] * t + rng.uniform(0, 2 * np.pi))
        x += wander + activity.noise * rng.standard_normal(n)
    return EcgRecording(profile.subject_id, activity.activity, fs, x)


@dataclass
class SegmentDataset:
    x: np.ndarray          # (N, W) float32
    subject: np.ndarray    # (N,) int
    activity: np.ndarray   # (N,) int
    split: np.ndarray      # (N,) uint8, 0 = train, 1 = test
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.x)

    def part(self, which: str) -> "SegmentDataset":
        flag = {"train": 0, "test": 1}[which]
        idx = np.flatnonzero(self.split == flag)
        return SegmentDataset(self.x[idx], self.subject[idx], self.activity[idx], self.split[idx], self.manifest)

    @property
    def n_subjects(self) -> int:
        return int(self.subject.max()) + 1 if len(self) else 0

    def to_bytes(self) -> bytes:
        n, w = self.x.shape
        rec = np.dtype([("sid", "<u2"), ("act", "u1"), ("x", "<f4", (w,)), ("split", "u1")])
        arr = np.empty(n, dtype=rec)
        arr["sid"], arr["act"], arr["x"], arr["split"] = self.subject, self.activity, self.x, self.split
        return DATASET_MAGIC + struct.pack("<II", DATASET_VERSION, n) + arr.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, window: int = 300) -> "SegmentDataset":
        if len(buf) < 12:
            raise DatasetFormatError(f"truncated header: {len(buf)} bytes")
        if buf[:4] != DATASET_MAGIC:
            raise DatasetFormatError(f"bad magic {buf[:4]!r} at offset 0, expected {DATASET_MAGIC!r}")
        version, n = struct.unpack("<II", buf[4:12])
        if version != DATASET_VERSION:
            raise DatasetFormatError(f"unsupported version {version} at offset 4")
        w = window
        expected = 12 + n * (4 + 4 * w)
        if len(buf) != expected:
            raise DatasetFormatError(
                f"payload size mismatch at offset {min(len(buf), expected)}: "
                f"{n} segments of {w} samples need {expected} bytes, file has {len(buf)}"
            )
        rec = np.dtype([("sid", "<u2"), ("act", "u1"), ("x", "<f4", (w,)), ("split", "u1")])
        arr = np.frombuffer(buf, dtype=rec, offset=12)
        if np.any(arr["split"] > 1) or np.any(arr["act"] > 2):
            raise DatasetFormatError("invalid split flag or activity code in payload")
        return cls(arr["x"].astype(np.float32), arr["sid"].astype(np.int64),
                   arr["act"].astype(np.int64), arr["split"].astype(np.uint8))

    def save(self, path, manifest_path=None) -> None:
        Path(path).write_bytes(self.to_bytes())
        if manifest_path is not None:
            Path(manifest_path).write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SegmentDataset":
        mpath = Path(path).with_suffix(".json")
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
        ds = cls.from_bytes(Path(path).read_bytes(), window=manifest.get("window", 300))
        ds.manifest = manifest
        return ds


def _split_flags(groups: list[np.ndarray], frac: float, rng: np.random.Generator, n: int) -> np.ndarray:
    split = np.ones(n, dtype=np.uint8)
    for idx in groups:
        perm = rng.permutation(idx)
        split[perm[: int(round(frac * len(idx)))]] = 0
    return split


def build_dataset(spec: DatasetSpec | None = None, dsp_cfg: DspConfig | None = None,
                  activities: dict | None = None) -> SegmentDataset:
    """Generate, preprocess and split one recording per (subject, activity)."""
    spec = spec or DatasetSpec()
    spec.validate()
    dsp_cfg = dsp_cfg or DspConfig()
    activities = activities or DEFAULT_ACTIVITIES
    profiles = make_profiles(spec)
    xs, sids, acts, recs = [], [], [], []
    for p in profiles:
        for act in Activity:
            rec = synthesize(p, activities[act], spec.seconds, spec.fs, seed=[spec.seed, p.subject_id, int(act)])
            segs = preprocess(rec, dsp_cfg)
            for s in segs:
                xs.append(s.samples)
                sids.append(s.subject_id)
                acts.append(int(s.activity))
                recs.append(p.subject_id * len(Activity) + int(act))
    n = len(xs)
    x = np.array(xs, dtype=np.float32).reshape(n, dsp_cfg.window_samples)
    sids, acts, recs = np.array(sids), np.array(acts), np.array(recs)

    rng = np.random.default_rng([spec.seed, 0x5E6])
    if spec.split_by == "segment":
        groups = [np.flatnonzero(recs == r) for r in np.unique(recs)]
        split = _split_flags(groups, spec.train_fraction, rng, n)
    else:
        # whole recordings go to one side; the 7:3 ratio holds per activity over subjects
        split = np.ones(n, dtype=np.uint8)
        for act in Activity:
            subj = rng.permutation(len(profiles))
            for s in subj[: int(round(spec.train_fraction * len(profiles)))]:
                split[(sids == s) & (acts == int(act))] = 0

    counts = {}
    for s in range(len(profiles)):
        for act in Activity:
            m = (sids == s) & (acts == int(act))
            counts[f"{s}/{act.name.lower()}"] = {"train": int((m & (split == 0)).sum()),
                                                 "test": int((m & (split == 1)).sum())}
    manifest = {
        "format": {"magic": DATASET_MAGIC.decode(), "version": DATASET_VERSION},
        "segments": n,
        "window": dsp_cfg.window_samples,
        "train": int((split == 0).sum()),
        "test": int((split == 1).sum()),
        "seed": spec.seed,
        "spec": asdict(spec),
        "dsp": asdict(dsp_cfg),
        "counts": counts,
    }
    return SegmentDataset(x, sids.astype(np.int64), acts.astype(np.int64), split, manifest)
