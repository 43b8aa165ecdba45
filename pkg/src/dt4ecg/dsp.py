"""ECG preprocessing: high-pass and notch biquads, zero-phase filtering,
min-max normalization and fixed-length segmentation."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal


class FilterDesignError(ValueError):
    pass


class Activity(enum.IntEnum):
    REST = 0
    EXERCISE = 1
    DEEP_BREATHING = 2


@dataclass
class EcgRecording:
    subject_id: int
    activity: Activity
    fs: float
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.size == 0:
            raise ValueError("recording has no samples")
        if self.fs <= 0:
            raise ValueError("sampling rate must be positive")
        self.activity = Activity(self.activity)


@dataclass
class BiquadCascade:
    """Second-order sections, each ``(b0, b1, b2, a1, a2)`` with ``a0 = 1``."""

    sections: list[tuple[float, float, float, float, float]] = field(default_factory=list)

    @property
    def order(self) -> int:
        return 2 * len(self.sections)

    def sos(self) -> np.ndarray:
        return np.array([[b0, b1, b2, 1.0, a1, a2] for b0, b1, b2, a1, a2 in self.sections])

    def is_stable(self) -> bool:
        return all(np.all(np.abs(np.roots([1.0, a1, a2])) < 1.0) for *_, a1, a2 in self.sections)

    def response(self, freqs_hz, fs: float) -> np.ndarray:
        """Complex frequency response evaluated directly on the unit circle."""
        z = np.exp(-1j * 2 * np.pi * np.asarray(freqs_hz, dtype=float) / fs)
        h = np.ones_like(z)
        for b0, b1, b2, a1, a2 in self.sections:
            h = h * (b0 + b1 * z + b2 * z * z) / (1.0 + a1 * z + a2 * z * z)
        return h

    def gain_db(self, freqs_hz, fs: float) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 20.0 * np.log10(np.abs(self.response(freqs_hz, fs)))


def _check_band(f: float, fs: float, what: str) -> None:
    if not 0.0 < f < fs / 2.0:
        raise FilterDesignError(
            f"{what} frequency {f} Hz must lie in (0, {fs / 2.0}) Hz: Nyquist limit for fs={fs} Hz"
        )


def design_highpass(fc: float, fs: float) -> BiquadCascade:
    """Second-order Butterworth high-pass via the pre-warped bilinear transform."""
    _check_band(fc, fs, "high-pass cutoff")
    k = math.tan(math.pi * fc / fs)
    q = 1.0 / math.sqrt(2.0)
    norm = 1.0 / (1.0 + k / q + k * k)
    b0 = norm
    a1 = 2.0 * (k * k - 1.0) * norm
    a2 = (1.0 - k / q + k * k) * norm
    return BiquadCascade([(b0, -2.0 * b0, b0, a1, a2)])


def design_notch(f0: float, fs: float, q: float = 30.0) -> BiquadCascade:
    """Biquad band-stop with unit-circle zeros at ``f0``.

    The -3 dB band is ``f0/q`` wide in digital frequency, so its edges sit
    near ``f0 +- f0/(2q)``.
    """
    _check_band(f0, fs, "notch")
    if q <= 0:
        raise FilterDesignError("notch quality factor must be positive")
    w0 = 2.0 * math.pi * f0 / fs
    beta = math.tan(w0 / q / 2.0)
    gain = 1.0 / (1.0 + beta)
    c = -2.0 * math.cos(w0) * gain
    return BiquadCascade([(gain, c, gain, c, 2.0 * gain - 1.0)])


def filtfilt(filt: BiquadCascade, x) -> np.ndarray:
    """Zero-phase forward-backward filtering with even (reflective) edge padding."""
    x = np.asarray(x, dtype=np.float64)
    if x.size <= 3 * filt.order:
        raise ValueError(f"filtfilt: input length {x.size} must exceed 3 x filter order = {3 * filt.order}")
    sos = filt.sos()
    padlen = min(x.size - 1, 3 * (2 * len(sos) + 1))
    return signal.sosfiltfilt(sos, x, padtype="even", padlen=padlen)


def normalize_01(x) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant signal maps to 0.5 everywhere."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def segment(x, window: int = 300) -> list[np.ndarray]:
    if window <= 0:
        raise ValueError("window must be positive")
    x = np.asarray(x)
    return [x[i * window : (i + 1) * window] for i in range(x.size // window)]


@dataclass
class DspConfig:
    highpass_hz: float = 0.5
    notch_hz: float = 40.0
    notch_q: float = 30.0
    notch_enabled: bool = True
    window_samples: int = 300


@dataclass
class LabeledSegment:
    samples: np.ndarray
    subject_id: int
    activity: Activity


def preprocess(rec: EcgRecording, cfg: DspConfig | None = None) -> list[LabeledSegment]:
    """High-pass, optional notch, whole-recording normalization, then segmentation."""
    cfg = cfg or DspConfig()
    y = filtfilt(design_highpass(cfg.highpass_hz, rec.fs), rec.samples)
    if cfg.notch_enabled:
        y = filtfilt(design_notch(cfg.notch_hz, rec.fs, cfg.notch_q), y)
    y = normalize_01(y)
    return [LabeledSegment(s, rec.subject_id, rec.activity) for s in segment(y, cfg.window_samples)]
