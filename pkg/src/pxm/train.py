"""Seeded training loop binding the ECG-text and ECG-teacher objectives.

The teacher side is precomputed once per cohort (frozen teacher) and
enters the loss as constants; when lambda is 1 the teacher branch never
touches the graph, so a lambda=1 run is bit-identical to a text-only run.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import NumericError, ParamStore, Tensor, adamw_step, backward, save_checkpoint
from .models import EcgEncoder, EcgEncoderConfig, TextEncoder, TextEncoderConfig, pad_token_batch
from .prob_embed import (
    LossWeights,
    combined_loss,
    infonce_loss,
    pcme_matching_loss,
    teacher_aggregate,
    vib_regularizer,
)
from .signal import AugmentConfig, Signal, augment, decimate, sliding_windows, zscore_normalize
from .synthdata import Cohort

__all__ = [
    "LOSS_VARIANTS",
    "TrainConfig",
    "Model",
    "StepLosses",
    "build_model",
    "prepare_window",
    "prepare_windows",
    "make_batches",
    "precompute_teacher",
    "train_step",
    "fit",
]

LOSS_VARIANTS = ("infonce", "infonce+teacher", "pcme", "pcme+teacher")
MODEL_FS = 100.0
METRIC_COLUMNS = ("epoch", "step", "L_et", "L_ee", "L_total", "a", "b")


@dataclass
class TrainConfig:
    lam: float = 0.9
    lr: float = 4e-4
    weight_decay: float = 0.1
    epochs: int = 30
    batch_size: int = 32
    embed_dim: int = 256
    seed: int = 0
    loss_variant: str = "pcme+teacher"
    vib_weight: float = 0.0
    infonce_temperature: float = 0.07
    sigmoid_scale_init: float = 10.0
    sigmoid_shift_init: float = 0.0
    encoder_preset: str = "compact"          # "compact" or "default"
    val_fraction: float = 0.1
    augment_scale_prob: float = 0.5
    augment_noise_prob: float = 0.5
    augment_noise_sd: float = 0.02

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr must be positive, batch_size >= 1, epochs >= 0")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(
                f"loss_variant must be one of {LOSS_VARIANTS}, got {self.loss_variant!r}"
            )
        if self.encoder_preset not in ("compact", "default"):
            raise ValueError(f"unknown encoder_preset {self.encoder_preset!r}")

    @property
    def uses_teacher(self) -> bool:
        return self.loss_variant.endswith("+teacher")

    @property
    def probabilistic(self) -> bool:
        return self.loss_variant.startswith("pcme")

    def loss_weights(self) -> LossWeights:
        return LossWeights(lam=self.lam, sigmoid_scale=self.sigmoid_scale_init,
                           sigmoid_shift=self.sigmoid_shift_init,
                           vib_weight=self.vib_weight,
                           infonce_temperature=self.infonce_temperature)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(scale_prob=self.augment_scale_prob,
                             noise_prob=self.augment_noise_prob,
                             noise_sd=self.augment_noise_sd)


@dataclass
class Model:
    ecg: EcgEncoder
    txt: TextEncoder
    params: ParamStore
    cfg: TrainConfig


@dataclass
class StepLosses:
    l_et: float
    l_ee: float
    l_total: float
    a: float
    b: float


def _softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


def build_model(cfg: TrainConfig, vocab_size: int) -> Model:
    """Assemble both encoders plus the shared calibration scalars."""
    if cfg.encoder_preset == "default":
        ecg_cfg = EcgEncoderConfig(embed_dim=cfg.embed_dim)
        txt_cfg = TextEncoderConfig(vocab_size=vocab_size, embed_dim=64,
                                    hidden_dim=128, feature_dim=128,
                                    out_dim=cfg.embed_dim)
    else:
        ecg_cfg = replace(EcgEncoderConfig.compact(), embed_dim=cfg.embed_dim)
        txt_cfg = TextEncoderConfig(vocab_size=vocab_size, out_dim=cfg.embed_dim)
    params = ParamStore()
    rng = np.random.default_rng([cfg.seed, 40831])
    ecg = EcgEncoder(ecg_cfg)
    txt = TextEncoder(txt_cfg)
    ecg.init_into(params, rng)
    txt.init_into(params, rng)
    params.add("cal.a_raw", _softplus_inv(cfg.sigmoid_scale_init))
    params.add("cal.b", cfg.sigmoid_shift_init)
    return Model(ecg, txt, params, cfg)


def prepare_window(sig: Signal, samples: int = 1000) -> np.ndarray:
    """Resample to the model rate, normalize, and take the first full window."""
    if sig.fs != MODEL_FS:
        sig = decimate(sig, MODEL_FS)
    sig = sliding_windows(sig, samples / MODEL_FS, samples / MODEL_FS)[0]
    return zscore_normalize(sig).data


def prepare_windows(samples_list, n_samples: int = 1000) -> np.ndarray:
    return np.stack([prepare_window(s.signal, n_samples) for s in samples_list])


def precompute_teacher(samples_list) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate every sample's frame set once; returns (mu, log_var) stacks."""
    mus, lvs = [], []
    for s in samples_list:
        z = teacher_aggregate(s.frames)
        mus.append(z.mu)
        lvs.append(z.log_var)
    mu = np.stack(mus)
    lv = np.stack(lvs)
    mu.flags.writeable = False
    lv.flags.writeable = False
    return mu, lv


def make_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Epoch-deterministic shuffle into batches; the last short batch is kept."""
    if n < 1:
        raise ValueError("cannot batch an empty cohort")
    order = np.random.default_rng([seed, 52289, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _batch_losses(model: Model, x: np.ndarray, token_batch: np.ndarray,
                  teacher_mu: np.ndarray | None, teacher_lv: np.ndarray | None):
    """Build the loss graph for one batch; returns Tensors (total, et, ee, a, b)."""
    cfg = model.cfg
    params = model.params
    mu_e, lv_e = model.ecg.forward(Tensor(x), params)
    mu_t, lv_t = model.txt.forward(token_batch, params)
    match = np.eye(x.shape[0])
    a = params["cal.a_raw"].softplus()
    b = params["cal.b"]
    if cfg.probabilistic:
        l_et = pcme_matching_loss(mu_e, lv_e, mu_t, lv_t, match, a, b)
    else:
        l_et = infonce_loss(mu_e, mu_t, match, cfg.infonce_temperature)

    l_ee = None
    if cfg.uses_teacher and cfg.lam < 1.0:
        t_mu = Tensor(teacher_mu)
        t_lv = Tensor(teacher_lv)
        if cfg.probabilistic:
            l_ee = pcme_matching_loss(mu_e, lv_e, t_mu, t_lv, match, a, b)
        else:
            l_ee = infonce_loss(mu_e, t_mu, match, cfg.infonce_temperature)

    total = l_et if l_ee is None else combined_loss(l_et, l_ee, cfg.lam)
    if cfg.vib_weight > 0 and cfg.probabilistic:
        objective = total + cfg.vib_weight * (vib_regularizer(mu_e, lv_e)
                                              + vib_regularizer(mu_t, lv_t))
    else:
        objective = total
    return objective, total, l_et, l_ee, a, b


def train_step(model: Model, x: np.ndarray, token_batch: np.ndarray,
               teacher_mu: np.ndarray | None,
               teacher_lv: np.ndarray | None) -> StepLosses:
    """One forward/backward/AdamW update; returns the loss breakdown."""
    cfg = model.cfg
    objective, total, l_et, l_ee, a, b = _batch_losses(
        model, x, token_batch, teacher_mu, teacher_lv)
    if not np.isfinite(objective.data):
        raise NumericError(
            f"non-finite loss: total={float(total.data)} et={float(l_et.data)}"
            f" ee={'-' if l_ee is None else float(l_ee.data)}"
            f" a={a.item()} b={b.item()}"
        )
    model.params.zero_grad()
    backward(objective, model.params)
    adamw_step(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return StepLosses(l_et=float(l_et.data),
                      l_ee=0.0 if l_ee is None else float(l_ee.data),
                      l_total=float(total.data), a=a.item(), b=b.item())


def _eval_total_loss(model: Model, x, token_batch, teacher_mu, teacher_lv) -> float:
    _, total, _, _, _, _ = _batch_losses(model, x, token_batch, teacher_mu, teacher_lv)
    return float(total.data)


@dataclass
class FitResult:
    model: Model
    metrics: list               # rows matching METRIC_COLUMNS
    best_epoch: int
    best_values: dict[str, np.ndarray]
    final_values: dict[str, np.ndarray]


def fit(cohort: Cohort, cfg: TrainConfig, out_dir=None) -> FitResult:
    """Train on the cohort's train split, select the best epoch on a held-out
    slice by total validation loss, and optionally write checkpoints, the
    metrics CSV and nothing else under ``out_dir``."""
    train_samples = cohort.split("train")
    if not train_samples:
        raise ValueError("cohort has no training samples")
    model = build_model(cfg, vocab_size=cohort.config.vocab_size)
    aug_cfg = cfg.augment_config()

    n_val = int(round(cfg.val_fraction * len(train_samples)))
    val_order = np.random.default_rng([cfg.seed, 60257]).permutation(len(train_samples))
    val_idx = set(val_order[:n_val].tolist())
    fit_samples = [s for i, s in enumerate(train_samples) if i not in val_idx]
    val_samples = [s for i, s in enumerate(train_samples) if i in val_idx]

    windows = prepare_windows(fit_samples, model.ecg.cfg.samples)
    tokens = [s.tokens for s in fit_samples]
    teacher_mu = teacher_lv = None
    if cfg.uses_teacher:
        teacher_mu, teacher_lv = precompute_teacher(fit_samples)
        if teacher_mu.shape[1] != cfg.embed_dim:
            raise ValueError(
                f"teacher dim {teacher_mu.shape[1]} != embedding dim {cfg.embed_dim}"
            )
    val_state = None
    if val_samples:
        val_x = prepare_windows(val_samples, model.ecg.cfg.samples)
        val_tok = pad_token_batch([s.tokens for s in val_samples])
        val_mu = val_lv = None
        if cfg.uses_teacher:
            val_mu, val_lv = precompute_teacher(val_samples)
        val_state = (val_x, val_tok, val_mu, val_lv)

    metrics = []
    snapshot = lambda: {n: model.params[n].data.copy() for n in model.params.names()}
    best_values = snapshot()
    best_epoch, best_val = 0, np.inf
    step = 0
    for epoch in range(cfg.epochs):
        for batch in make_batches(len(fit_samples), cfg.batch_size, cfg.seed, epoch):
            x = windows[batch]
            if aug_cfg.scale_prob > 0 or aug_cfg.noise_prob > 0:
                x = np.stack([
                    augment(Signal(xi, MODEL_FS), [cfg.seed, 71993, epoch, int(i)],
                            aug_cfg).data
                    for xi, i in zip(x, batch)
                ])
            tok = pad_token_batch([tokens[i] for i in batch])
            t_mu = teacher_mu[batch] if teacher_mu is not None else None
            t_lv = teacher_lv[batch] if teacher_lv is not None else None
            losses = train_step(model, x, tok, t_mu, t_lv)
            step += 1
            metrics.append((epoch, step, losses.l_et, losses.l_ee,
                            losses.l_total, losses.a, losses.b))
        if val_state is not None:
            val_loss = _eval_total_loss(model, *val_state)
            if val_loss < best_val:
                best_val, best_epoch = val_loss, epoch + 1
                best_values = snapshot()
    if cfg.epochs == 0 or val_state is None:
        best_values = snapshot()
        best_epoch = cfg.epochs
    final_values = snapshot()

    result = FitResult(model, metrics, best_epoch, best_values, final_values)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model.params, out / "final.pxm")
        restore = snapshot()
        model.params.load_values(best_values)
        save_checkpoint(model.params, out / "best.pxm")
        model.params.load_values(restore)
        write_metrics_csv(metrics, out / "metrics.csv")
    return result


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
