"""ECG/VCG preprocessing: anti-alias decimation, Kors 12-lead
reconstruction, normalization, augmentation and sliding windows.

Conventions: signals are (leads, samples) float64 arrays in millivolts,
lead names track rows, and every random transform is driven by an
explicit seed so the whole pipeline replays bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

__all__ = [
    "Signal",
    "FirFilter",
    "AugmentConfig",
    "design_lowpass_fir",
    "decimate",
    "kors_vcg_to_12lead",
    "zscore_normalize",
    "augment",
    "sliding_windows",
    "read_signal_csv",
    "write_signal_csv",
    "load_kors_matrix",
    "KORS_MATRIX",
    "TWELVE_LEADS",
]

VCG_LEADS = ["X", "Y", "Z"]
EIGHT_LEADS = ["I", "II", "V1", "V2", "V3", "V4", "V5", "V6"]
TWELVE_LEADS = ["I", "II", "III", "aVR", "aVL", "aVF",
                "V1", "V2", "V3", "V4", "V5", "V6"]

# Kors regression matrix: rows X, Y, Z; columns I, II, V1..V6.
# Maps the 8 independent leads to the vectorcardiogram.
KORS_MATRIX = np.array([
    [0.38, -0.07, -0.13, 0.05, -0.01, 0.14, 0.06, 0.54],
    [-0.07, 0.93, 0.06, -0.02, -0.05, 0.06, -0.17, 0.13],
    [0.11, -0.23, -0.43, -0.06, -0.14, -0.20, -0.11, 0.31],
])


@dataclass
class Signal:
    """A multi-lead time series at a fixed sampling rate."""

    data: np.ndarray          # (leads, samples), millivolts
    fs: float                 # samples per second
    lead_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"signal data must be (leads, samples), got {self.data.shape}")
        if self.fs <= 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs}")
        if not self.lead_names:
            self.lead_names = [f"ch{i}" for i in range(self.data.shape[0])]
        if len(self.lead_names) != self.data.shape[0]:
            raise ValueError(
                f"{len(self.lead_names)} lead names for {self.data.shape[0]} rows"
            )

    @property
    def n_leads(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.fs


@dataclass
class FirFilter:
    """Symmetric FIR taps with unit DC gain."""

    coefficients: np.ndarray
    cutoff_hz: float

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if abs(self.coefficients.sum() - 1.0) > 1e-9:
            raise ValueError("FIR coefficients must sum to 1 (unit DC gain)")
        if not np.allclose(self.coefficients, self.coefficients[::-1], atol=0, rtol=0):
            raise ValueError("FIR coefficients must be symmetric (linear phase)")


def design_lowpass_fir(fs_in: float, fs_out: float, taps: int = 101) -> FirFilter:
    """Hamming-windowed sinc low-pass for decimation from fs_in to fs_out.

    Cutoff is 0.4 * fs_out, leaving a transition band below the output
    Nyquist; taps are normalized to unit DC gain.
    """
    if fs_out >= fs_in:
        raise ValueError(f"fs_out ({fs_out}) must be below fs_in ({fs_in})")
    if taps % 2 == 0 or taps < 31:
        raise ValueError(f"taps must be odd and >= 31, got {taps}")
    cutoff = 0.4 * fs_out
    fc = cutoff / fs_in  # cycles per input sample
    mid = taps // 2
    n = np.arange(taps) - mid
    h = 2.0 * fc * np.sinc(2.0 * fc * n)
    h *= np.hamming(taps)
    h /= h.sum()
    return FirFilter(h, cutoff)


def _zero_phase_filter(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Filter with a symmetric kernel, symmetric edge padding, no delay."""
    half = len(h) // 2
    padded = np.pad(x, (half, half), mode="symmetric")
    return np.convolve(padded, h, mode="valid")


def decimate(s: Signal, fs_out: float, taps: int = 101) -> Signal:
    """Low-pass each lead (zero phase) then keep every (fs_in/fs_out)-th sample."""
    ratio = s.fs / fs_out
    if abs(ratio - round(ratio)) > 1e-9:
        raise ValueError(f"fs_in {s.fs} is not an integer multiple of fs_out {fs_out}")
    ratio = int(round(ratio))
    filt = design_lowpass_fir(s.fs, fs_out, taps)
    out = np.stack([_zero_phase_filter(lead, filt.coefficients)[::ratio]
                    for lead in s.data])
    return Signal(out, fs_out, list(s.lead_names))


_KORS_CACHE: dict = {}


def load_kors_matrix(path=None) -> np.ndarray:
    """Return the 3x8 Kors matrix, optionally from a CSV override.

    Resolution order: explicit path, PXM_KORS_MATRIX env var, built-in.
    Files are cached by path.
    """
    if path is None:
        path = os.environ.get("PXM_KORS_MATRIX") or None
    if path is None:
        return KORS_MATRIX.copy()
    key = str(path)
    if key not in _KORS_CACHE:
        mat = np.loadtxt(path, delimiter=",", dtype=np.float64)
        if mat.shape != (3, 8):
            raise ValueError(f"Kors matrix at {path} must be 3x8, got {mat.shape}")
        _KORS_CACHE[key] = mat
    return _KORS_CACHE[key]


def kors_vcg_to_12lead(vcg: Signal, kors: np.ndarray | None = None) -> Signal:
    """Reconstruct a 12-lead ECG from a 3-lead VCG.

    The 8 independent leads are the Moore-Penrose pseudo-inverse of the
    Kors matrix applied to [X; Y; Z]; the 4 remaining limb leads follow
    from the Einthoven/Goldberger identities.
    """
    if vcg.n_leads != 3:
        raise ValueError(f"VCG must have exactly 3 leads, got {vcg.n_leads}")
    k = load_kors_matrix() if kors is None else np.asarray(kors, dtype=np.float64)
    leads8 = np.linalg.pinv(k) @ vcg.data  # (8, T): I, II, V1..V6
    lead_i, lead_ii = leads8[0], leads8[1]
    twelve = np.empty((12, vcg.n_samples))
    twelve[0] = lead_i
    twelve[1] = lead_ii
    twelve[2] = lead_ii - lead_i            # III
    twelve[3] = -(lead_i + lead_ii) / 2.0   # aVR
    twelve[4] = lead_i - lead_ii / 2.0      # aVL
    twelve[5] = lead_ii - lead_i / 2.0      # aVF
    twelve[6:] = leads8[2:]
    return Signal(twelve, vcg.fs, list(TWELVE_LEADS))


def zscore_normalize(s: Signal) -> Signal:
    """Per-lead zero mean, unit variance; constant leads map to all zeros."""
    if s.n_samples < 2:
        raise ValueError("each lead needs at least 2 samples to normalize")
    mean = s.data.mean(axis=1, keepdims=True)
    sd = s.data.std(axis=1, keepdims=True)
    out = np.zeros_like(s.data)
    live = sd[:, 0] > 0.0
    out[live] = (s.data[live] - mean[live]) / sd[live]
    return Signal(out, s.fs, list(s.lead_names))


@dataclass
class AugmentConfig:
    """Probabilities and magnitudes for training-time signal augmentation."""

    crop_prob: float = 0.0
    crop_frac: float = 0.1        # max fraction of samples shifted out
    scale_prob: float = 0.0
    scale_amp: float = 0.2        # scale drawn from [1-amp, 1+amp]
    noise_prob: float = 0.0
    noise_sd: float = 0.05
    wander_prob: float = 0.0
    wander_amp: float = 0.1
    wander_max_hz: float = 0.5

    def __post_init__(self):
        for name in ("crop_frac", "scale_amp", "noise_sd", "wander_amp", "wander_max_hz"):
            if getattr(self, name) < 0:
                raise ValueError(f"augment magnitude {name} must be >= 0")


def augment(s: Signal, rng_seed, cfg: AugmentConfig) -> Signal:
    """Apply the configured random transforms; identical seed, identical output.

    ``rng_seed`` is anything numpy's default_rng accepts (int or int list).
    Draw order is fixed (crop, scale, noise, wander) so seeds stay stable
    across config changes that only toggle probabilities.
    """
    rng = np.random.default_rng(rng_seed)
    data = s.data.copy()
    t = s.n_samples

    do_crop = rng.random() < cfg.crop_prob
    shift = int(rng.integers(1, max(2, int(cfg.crop_frac * t) + 1)))
    front = rng.random() < 0.5
    if do_crop and shift < t:
        if front:
            data = np.concatenate([np.zeros((s.n_leads, shift)), data[:, :-shift]], axis=1)
        else:
            data = np.concatenate([data[:, shift:], np.zeros((s.n_leads, shift))], axis=1)

    do_scale = rng.random() < cfg.scale_prob
    factor = 1.0 + cfg.scale_amp * (2.0 * rng.random() - 1.0)
    if do_scale:
        data = data * factor

    do_noise = rng.random() < cfg.noise_prob
    noise = rng.normal(0.0, cfg.noise_sd, size=data.shape)
    if do_noise:
        data = data + noise

    do_wander = rng.random() < cfg.wander_prob
    freq = rng.random() * cfg.wander_max_hz
    phase = rng.random() * 2.0 * np.pi
    if do_wander:
        tt = np.arange(t) / s.fs
        data = data + cfg.wander_amp * np.sin(2.0 * np.pi * freq * tt + phase)

    return Signal(data, s.fs, list(s.lead_names))


def sliding_windows(s: Signal, win_seconds: float = 10.0,
                    stride_seconds: float = 5.0) -> list[Signal]:
    """Cut full windows of win_seconds; the final partial window is dropped."""
    win = int(round(win_seconds * s.fs))
    stride = int(round(stride_seconds * s.fs))
    if s.n_samples < win:
        raise ValueError(
            f"signal of {s.duration:.1f}s shorter than {win_seconds}s window"
        )
    count = (s.n_samples - win) // stride + 1
    return [Signal(s.data[:, i * stride : i * stride + win], s.fs, list(s.lead_names))
            for i in range(count)]


# -- file format ----------------------------------------------------------------


def write_signal_csv(s: Signal, path) -> None:
    """First line ``fs=<Hz>``, then a lead-name header and one row per sample."""
    with open(path, "w") as fh:
        fs = s.fs
        fh.write(f"fs={fs:g}\n")
        fh.write(",".join(s.lead_names) + "\n")
        pd.DataFrame(s.data.T).to_csv(fh, header=False, index=False,
                                      float_format="%.10g", lineterminator="\n")


def read_signal_csv(path) -> Signal:
    with open(path) as fh:
        first = fh.readline().strip()
        if not first.startswith("fs="):
            raise ValueError(f"{path}: expected 'fs=<Hz>' header, got {first!r}")
        fs = float(first[3:])
        frame = pd.read_csv(fh, dtype=np.float64)
    return Signal(frame.to_numpy().T, fs, list(frame.columns))
