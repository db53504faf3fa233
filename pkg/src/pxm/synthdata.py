"""Deterministic synthetic cohorts of paired (signal, report, teacher) samples.

Each sample gets a quasi-periodic P-QRS-T wavelet train built as a 3-lead
dipole trajectory and reconstructed into 12 leads through the Kors
pseudo-inverse. A class-specific late-beat bump is inserted only into the
10-second windows flagged as event windows (an event_rate fraction), so
some recordings carry no class evidence at all; that is the many-to-many
ambiguity the probabilistic objective is meant to absorb. Reports are
token sequences mixing class-block tokens with sample-level detail
(heart-rate bucket, event presence, noise grade) and shared filler.
Teacher frames sit on mutually orthogonal class directions plus isotropic
jitter. Everything is a pure function of the config seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .prob_embed import FrameEmbeddingSet
from .signal import Signal, kors_vcg_to_12lead, write_signal_csv, read_signal_csv

__all__ = [
    "CohortConfig",
    "PairedSample",
    "Cohort",
    "generate_cohort",
    "label_lvef",
    "save_cohort",
    "load_cohort",
]

WINDOW_SECONDS = 10.0

# Base beat wavelets: (offset s, width s, amplitude on X/Y/Z) after beat onset.
_BEAT_WAVELETS = (
    (0.08, 0.020, (0.08, 0.05, -0.03)),    # P
    (0.16, 0.006, (-0.10, -0.05, 0.05)),   # Q
    (0.18, 0.009, (1.20, 0.70, -0.40)),    # R
    (0.20, 0.006, (-0.25, -0.10, 0.12)),   # S
    (0.35, 0.040, (0.25, 0.15, -0.10)),    # T
)


@dataclass
class CohortConfig:
    classes: int = 8
    train_per_class: int = 64
    test_per_class: int = 32
    fs: float = 100.0
    duration_s: float = 10.0
    event_rate: float = 0.6                  # fraction of windows with the class pattern
    noise_grades: tuple = (0.0, 0.1, 0.3)    # per-sample additive noise sd, cycled
    teacher_frames: int = 16
    teacher_dim: int = 256
    teacher_jitter: float = 0.1
    vocab_size: int = 64
    class_tokens: int = 3                    # tokens in each class's vocab block
    filler_tokens_max: int = 3
    seed: int = 0
    noise_burst: bool = False                # inject one annotated burst per record
    burst_duration_s: float = 3.0
    burst_sd: float = 1.5
    lvef_low_classes: tuple | None = None    # classes labelled LVEF-low; default first half

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if not 0.0 < self.event_rate <= 1.0:
            raise ValueError(f"event_rate must lie in (0, 1], got {self.event_rate}")
        if self.teacher_frames < 1:
            raise ValueError("teacher_frames must be >= 1")
        if self.duration_s < WINDOW_SECONDS:
            raise ValueError(f"duration_s must be >= {WINDOW_SECONDS}")
        if self.teacher_dim < self.classes:
            raise ValueError("teacher_dim must be >= classes for orthogonal directions")
        layout = self.vocab_layout()
        if layout["filler"][1] - layout["filler"][0] < 2:
            raise ValueError(f"vocab_size {self.vocab_size} too small for token layout")

    def vocab_layout(self) -> dict:
        """Token id ranges: [start, end) per group; id 0 is padding."""
        start = 1
        blocks = []
        for _ in range(self.classes):
            blocks.append((start, start + self.class_tokens))
            start += self.class_tokens
        hr = (start, start + 6)
        start = hr[1]
        event = (start, start + 2)
        start = event[1]
        noise = (start, start + len(self.noise_grades))
        start = noise[1]
        return {"class_blocks": blocks, "hr": hr, "event": event, "noise": noise,
                "filler": (start, self.vocab_size)}

    def lvef_map(self) -> dict[int, int]:
        low = self.lvef_low_classes
        if low is None:
            low = tuple(range(self.classes // 2))
        return {c: (1 if c in low else 0) for c in range(self.classes)}


@dataclass
class PairedSample:
    """One training unit: ECG signal, report tokens, teacher frames, labels."""

    sample_id: str
    signal: Signal
    tokens: np.ndarray
    frames: FrameEmbeddingSet
    class_label: int
    lvef_binary: int
    noise_grade: float
    split: str                                # "train" or "test"
    heart_rate: float
    event_windows: list = field(default_factory=list)   # bool per 10-s window
    burst_span: tuple | None = None                     # (start_s, end_s)


@dataclass
class Cohort:
    config: CohortConfig
    samples: list
    class_prompts: list                       # per class: list of token id arrays

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]


def _class_structures(cfg: CohortConfig):
    """Per-class teacher directions and signal-bump parameters (seed-fixed).

    Bump centers are evenly spaced over the late-beat region and the bump
    dipole directions cycle through a signed orthogonal triad, so no two
    classes collide in both timing and lead pattern.
    """
    rng = np.random.default_rng([cfg.seed, 915])
    raw = rng.normal(size=(cfg.classes, cfg.teacher_dim))
    directions, _ = np.linalg.qr(raw.T)
    directions = directions.T[: cfg.classes]            # orthonormal rows
    centers = np.linspace(0.40, 0.62, cfg.classes)
    triad = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    bumps = []
    for c in range(cfg.classes):
        width = 0.03 if c % 2 == 0 else 0.05
        direction = triad[:, c % 3] * (1.0 if (c // 3) % 2 == 0 else -1.0)
        bumps.append((float(centers[c]), width, 0.6 * direction))
    return directions, bumps


def _render_vcg(cfg: CohortConfig, rng, heart_rate: float, event_windows,
                bump) -> np.ndarray:
    n = int(round(cfg.duration_s * cfg.fs))
    t = np.arange(n) / cfg.fs
    vcg = np.zeros((3, n))
    period = 60.0 / heart_rate
    beat_starts = np.arange(0.0, cfg.duration_s, period)
    center_b, width_b, amp_b = bump
    for b0 in beat_starts:
        for off, width, amp in _BEAT_WAVELETS:
            c = b0 + off
            pulse = np.exp(-0.5 * ((t - c) / width) ** 2)
            vcg += np.outer(amp, pulse)
        win_idx = min(int(b0 // WINDOW_SECONDS), len(event_windows) - 1)
        if event_windows[win_idx]:
            c = b0 + center_b
            pulse = np.exp(-0.5 * ((t - c) / width_b) ** 2)
            vcg += np.outer(amp_b, pulse)
    return vcg


def _draw_event_windows(cfg: CohortConfig, rng, n_windows: int) -> list:
    flags = list(rng.random(n_windows) < cfg.event_rate)
    if cfg.event_rate < 1.0 and n_windows >= 2 and all(flags):
        # Long recordings must keep at least one pattern-free window.
        flags[int(rng.integers(0, n_windows))] = False
    return flags


def _make_tokens(cfg: CohortConfig, rng, class_label: int, hr_bucket: int,
                 has_event: bool, grade_idx: int) -> np.ndarray:
    layout = cfg.vocab_layout()
    lo, hi = layout["class_blocks"][class_label]
    ids = list(range(lo, hi))
    ids.append(layout["hr"][0] + hr_bucket)
    ids.append(layout["event"][0] + int(has_event))
    ids.append(layout["noise"][0] + grade_idx)
    f_lo, f_hi = layout["filler"]
    n_fill = int(rng.integers(1, cfg.filler_tokens_max + 1))
    ids.extend(int(x) for x in rng.integers(f_lo, f_hi, size=n_fill))
    return np.array(ids, dtype=np.int64)


def generate_cohort(cfg: CohortConfig) -> Cohort:
    """Build a full paired cohort; bit-identical for identical configs."""
    directions, bumps = _class_structures(cfg)
    lvef = cfg.lvef_map()
    n_windows = int(cfg.duration_s // WINDOW_SECONDS)
    samples = []
    counter = 0
    for split, per_class in (("train", cfg.train_per_class), ("test", cfg.test_per_class)):
        for cls in range(cfg.classes):
            for j in range(per_class):
                rng = np.random.default_rng([cfg.seed, 7717, counter])
                heart_rate = rng.uniform(60.0, 90.0)
                hr_bucket = min(int((heart_rate - 60.0) / 5.0), 5)
                grade_idx = j % len(cfg.noise_grades)
                grade = cfg.noise_grades[grade_idx]
                events = _draw_event_windows(cfg, rng, n_windows)
                vcg = _render_vcg(cfg, rng, heart_rate, events, bumps[cls])
                sig = kors_vcg_to_12lead(Signal(vcg, cfg.fs))
                data = sig.data + rng.normal(0.0, 1.0, sig.data.shape) * grade
                burst_span = None
                if cfg.noise_burst:
                    start = rng.uniform(0.0, cfg.duration_s - cfg.burst_duration_s)
                    burst_span = (start, start + cfg.burst_duration_s)
                    i0 = int(start * cfg.fs)
                    i1 = int(burst_span[1] * cfg.fs)
                    data[:, i0:i1] += rng.normal(0.0, cfg.burst_sd, (12, i1 - i0))
                frames = directions[cls] + cfg.teacher_jitter * rng.normal(
                    size=(cfg.teacher_frames, cfg.teacher_dim))
                tokens = _make_tokens(cfg, rng, cls, hr_bucket, any(events), grade_idx)
                samples.append(PairedSample(
                    sample_id=f"{split}_{counter:05d}",
                    signal=Signal(data, cfg.fs, list(sig.lead_names)),
                    tokens=tokens,
                    frames=FrameEmbeddingSet(frames),
                    class_label=cls,
                    lvef_binary=lvef[cls],
                    noise_grade=float(grade),
                    split=split,
                    heart_rate=float(heart_rate),
                    event_windows=events,
                    burst_span=burst_span,
                ))
                counter += 1
    layout = cfg.vocab_layout()
    prompts = [[np.arange(lo, hi, dtype=np.int64)] for lo, hi in layout["class_blocks"]]
    return Cohort(cfg, samples, prompts)


def label_lvef(sample: PairedSample, mapping: dict[int, int] | None = None,
               cfg: CohortConfig | None = None) -> int:
    """Binary low-ejection-fraction label from the class label."""
    if mapping is None:
        if cfg is None:
            raise ValueError("label_lvef needs a mapping or a config")
        mapping = cfg.lvef_map()
    if sample.class_label not in mapping:
        raise KeyError(f"class {sample.class_label} has no LVEF mapping")
    return mapping[sample.class_label]


# -- persistence ----------------------------------------------------------------


def save_cohort(cohort: Cohort, out_dir) -> Path:
    """Write manifest.json plus per-sample signal CSVs and frame binaries."""
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in cohort.samples:
        sig_rel = f"samples/{s.sample_id}.csv"
        frames_rel = f"samples/{s.sample_id}.frames.bin"
        write_signal_csv(s.signal, out / sig_rel)
        with open(out / frames_rel, "wb") as fh:
            fh.write(np.ascontiguousarray(s.frames.frames, dtype="<f8").tobytes())
        entries.append({
            "sample_id": s.sample_id,
            "signal": sig_rel,
            "frames": frames_rel,
            "n_frames": int(s.frames.frames.shape[0]),
            "teacher_dim": int(s.frames.frames.shape[1]),
            "tokens": [int(x) for x in s.tokens],
            "class_label": int(s.class_label),
            "lvef_binary": int(s.lvef_binary),
            "noise_grade": float(s.noise_grade),
            "split": s.split,
            "heart_rate": float(s.heart_rate),
            "event_windows": [bool(x) for x in s.event_windows],
            "burst_span": list(s.burst_span) if s.burst_span else None,
        })
    manifest = {
        "config": asdict(cohort.config),
        "class_prompts": [[[int(t) for t in p] for p in plist]
                          for plist in cohort.class_prompts],
        "samples": entries,
    }
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def load_cohort(cohort_dir) -> Cohort:
    root = Path(cohort_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no cohort manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    raw_cfg = dict(manifest["config"])
    for key in ("noise_grades", "lvef_low_classes"):
        if raw_cfg.get(key) is not None:
            raw_cfg[key] = tuple(raw_cfg[key])
    cfg = CohortConfig(**raw_cfg)
    samples = []
    for e in manifest["samples"]:
        frames = np.frombuffer((root / e["frames"]).read_bytes(), dtype="<f8")
        frames = frames.reshape(e["n_frames"], e["teacher_dim"]).astype(np.float64)
        samples.append(PairedSample(
            sample_id=e["sample_id"],
            signal=read_signal_csv(root / e["signal"]),
            tokens=np.array(e["tokens"], dtype=np.int64),
            frames=FrameEmbeddingSet(frames),
            class_label=e["class_label"],
            lvef_binary=e["lvef_binary"],
            noise_grade=e["noise_grade"],
            split=e["split"],
            heart_rate=e["heart_rate"],
            event_windows=[bool(x) for x in e["event_windows"]],
            burst_span=tuple(e["burst_span"]) if e["burst_span"] else None,
        ))
    prompts = [[np.array(p, dtype=np.int64) for p in plist]
               for plist in manifest["class_prompts"]]
    return Cohort(cfg, samples, prompts)
