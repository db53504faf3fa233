"""Probabilistic embeddings and their losses.

Each item is a diagonal Gaussian (mu, log_var). The expected squared
Euclidean distance between independent samples of two such Gaussians has
a closed form,

    d(z1, z2) = ||mu1 - mu2||_2^2 + ||sigma1^2 + sigma2^2||_1,

which is turned into a match probability through a trainable logistic
calibration and supervised with binary cross-entropy over the full
pairwise match matrix. A deterministic InfoNCE variant, a KL-to-unit
regularizer and the frozen-teacher frame aggregation live here too.

Loss functions come in two flavours: graph ops on autodiff Tensors
(used in training and gradient checks) and float-level wrappers over
ProbEmbedding values (used in evaluation and tests).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, ShapeError, Tensor, dense

__all__ = [
    "LOGVAR_MIN",
    "LOGVAR_MAX",
    "ProbEmbedding",
    "FrameEmbeddingSet",
    "LossWeights",
    "ProjectionHeads",
    "l2_normalize_rows",
    "csd",
    "pairwise_csd",
    "match_prob",
    "pcme_matching_loss",
    "infonce_loss",
    "vib_regularizer",
    "teacher_aggregate",
    "combined_loss",
    "uncertainty_scalar",
    "identity_match",
]

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
TEACHER_VAR_FLOOR = 1e-8


@dataclass
class ProbEmbedding:
    """A diagonal-Gaussian latent: mean vector plus log-variance vector."""

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mu.shape != self.log_var.shape or self.mu.ndim != 1:
            raise ValueError(
                f"mu/log_var must be equal-length vectors, got {self.mu.shape} and {self.log_var.shape}"
            )
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.log_var))):
            raise ValueError("embedding contains non-finite values")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)


@dataclass
class FrameEmbeddingSet:
    """n teacher frame vectors of dimension d, one per video frame."""

    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be a nonempty (n, d) matrix, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frame embeddings contain non-finite values")


@dataclass
class LossWeights:
    """Objective hyperparameters; ``lam`` is the text-vs-teacher balance."""

    lam: float = 0.9
    sigmoid_scale: float = 10.0
    sigmoid_shift: float = 0.0
    vib_weight: float = 0.0
    infonce_temperature: float = 0.07

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.sigmoid_scale <= 0:
            raise ValueError(f"sigmoid scale must be positive, got {self.sigmoid_scale}")
        if self.vib_weight < 0:
            raise ValueError(f"vib weight must be >= 0, got {self.vib_weight}")
        if self.infonce_temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.infonce_temperature}")


def identity_match(n: int) -> np.ndarray:
    return np.eye(n)


def _as_match(match: np.ndarray, m: int, n: int) -> np.ndarray:
    match = np.asarray(match, dtype=np.float64)
    if match.shape != (m, n):
        raise ShapeError(f"match matrix {match.shape} does not fit batches ({m}, {n})")
    if not np.all((match == 0.0) | (match == 1.0)):
        raise ValueError("match matrix entries must be 0 or 1")
    return match


# -- graph-level ops -----------------------------------------------------------


def l2_normalize_rows(x: Tensor) -> Tensor:
    norm = (x * x).sum(axis=1, keepdims=True).sqrt()
    if np.any(norm.data < 1e-12):
        raise ValueError("cannot normalize a zero-norm embedding")
    return x / norm


class ProjectionHeads:
    """Two affine heads on shared features: a unit-norm mean and a
    clamped log-variance.

    The mean head starts as a shared bias direction plus small weights,
    so initial embeddings cluster and pairwise distances land inside the
    active region of the calibrated matching sigmoid. A plain random
    init puts unit vectors ~sqrt(2) apart, which saturates the logits at
    the default scale and lets the one-sided positive pull collapse the
    encoders before any repulsion acts.
    """

    def __init__(self, name: str, d_in: int, d_out: int):
        self.name, self.d_in, self.d_out = name, d_in, d_out

    def init_into(self, params: ParamStore, rng: np.random.Generator,
                  logvar_bias: float = -8.0) -> None:
        params.add(f"{self.name}.mu.w",
                   rng.normal(0.0, 0.1 / np.sqrt(self.d_in), (self.d_in, self.d_out)))
        anchor = np.zeros(self.d_out)
        anchor[0] = 1.0
        params.add(f"{self.name}.mu.b", anchor)
        params.add(f"{self.name}.lv.w",
                   rng.normal(0.0, 1e-2, (self.d_in, self.d_out)))
        params.add(f"{self.name}.lv.b", np.full(self.d_out, logvar_bias))

    def __call__(self, feats: Tensor, params: ParamStore) -> tuple[Tensor, Tensor]:
        if feats.data.ndim != 2 or feats.shape[1] != self.d_in:
            raise ShapeError(f"{self.name}: expected (B,{self.d_in}) features, got {feats.shape}")
        raw_mu = dense(feats, params[f"{self.name}.mu.w"], params[f"{self.name}.mu.b"])
        mu = l2_normalize_rows(raw_mu)
        lv = dense(feats, params[f"{self.name}.lv.w"], params[f"{self.name}.lv.b"])
        return mu, lv.clamp(LOGVAR_MIN, LOGVAR_MAX)


def pairwise_csd(mu_a: Tensor, lv_a: Tensor, mu_b: Tensor, lv_b: Tensor) -> Tensor:
    """All-pairs closed-form sampled distance, shape (m, n)."""
    if mu_a.shape[1] != mu_b.shape[1]:
        raise ShapeError(f"embedding dims differ: {mu_a.shape[1]} vs {mu_b.shape[1]}")
    sq_a = (mu_a * mu_a).sum(axis=1, keepdims=True)        # (m, 1)
    sq_b = (mu_b * mu_b).sum(axis=1, keepdims=True)        # (n, 1)
    cross = mu_a @ mu_b.T
    mu_term = sq_a + sq_b.T - cross * 2.0
    var_a = lv_a.exp().sum(axis=1, keepdims=True)
    var_b = lv_b.exp().sum(axis=1, keepdims=True)
    return mu_term + var_a + var_b.T


def pcme_matching_loss(mu_a: Tensor, lv_a: Tensor, mu_b: Tensor, lv_b: Tensor,
                       match: np.ndarray, scale: Tensor, shift: Tensor) -> Tensor:
    """Mean BCE between the calibrated match probability and the match matrix.

    ``scale``/``shift`` are the trainable logistic calibration scalars;
    probabilities are never materialized, the BCE is computed from logits.
    """
    m, n = mu_a.shape[0], mu_b.shape[0]
    if m == 0 or n == 0:
        raise ValueError("pcme_matching_loss: empty batch")
    mm = _as_match(match, m, n)
    d = pairwise_csd(mu_a, lv_a, mu_b, lv_b)
    logits = d * (-1.0) * scale + shift
    bce = (logits * (-1.0)).softplus() * mm + logits.softplus() * (1.0 - mm)
    return bce.mean()


def infonce_loss(mu_a: Tensor, mu_b: Tensor, match: np.ndarray,
                 temperature: float) -> Tensor:
    """Symmetric cross-entropy over temperature-scaled cosine similarities."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    m, n = mu_a.shape[0], mu_b.shape[0]
    if m == 0 or n == 0:
        raise ValueError("infonce_loss: empty batch")
    mm = _as_match(match, m, n)
    if np.any(mm.sum(axis=1) != 1.0) or np.any(mm.sum(axis=0) != 1.0):
        raise ValueError("infonce_loss: every row and column needs exactly one positive")
    sims = (l2_normalize_rows(mu_a) @ l2_normalize_rows(mu_b).T) * (1.0 / temperature)

    def one_way(s: Tensor, mat: np.ndarray) -> Tensor:
        # Log-sum-exp with a detached row max: exact value, exact gradient.
        row_max = Tensor(s.data.max(axis=1, keepdims=True))
        lse = (s - row_max).exp().sum(axis=1, keepdims=True).log() + row_max
        pos = (s * mat).sum(axis=1, keepdims=True)
        return (lse - pos).mean()

    return (one_way(sims, mm) + one_way(sims.T, mm.T)) * 0.5


def vib_regularizer(mu: Tensor, lv: Tensor) -> Tensor:
    """Mean KL(N(mu, diag sigma^2) || N(0, I)) over the batch."""
    kl_terms = lv.exp() + mu * mu - 1.0 - lv
    return kl_terms.sum(axis=1).mean() * 0.5


# -- value-level API -----------------------------------------------------------


def csd(z1: ProbEmbedding, z2: ProbEmbedding) -> float:
    """Closed-form sampled distance between two Gaussian embeddings."""
    if z1.dim != z2.dim:
        raise ShapeError(f"embedding dims differ: {z1.dim} vs {z2.dim}")
    diff = z1.mu - z2.mu
    return float(diff @ diff + np.sum(z1.var + z2.var))


def match_prob(d: float, a: float, b: float) -> float:
    """Logistic calibration of a distance into a match probability."""
    if a <= 0:
        raise ValueError(f"scale a must be positive, got {a}")
    z = -a * d + b
    if z >= 0:
        return float(1.0 / (1.0 + np.exp(-z)))
    return float(np.exp(z) / (1.0 + np.exp(z)))


def combined_loss(loss_et, loss_ee, lam: float):
    """Convex combination of the text and teacher terms."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return lam * loss_et + (1.0 - lam) * loss_ee


def teacher_aggregate(frames: FrameEmbeddingSet) -> ProbEmbedding:
    """Collapse a frame-embedding set to a Gaussian: sample mean and
    population variance (divisor n), with a small variance floor so a
    single-frame video stays representable. The mean is left unnormalized.
    """
    e = frames.frames
    mu = e.mean(axis=0)
    centered = e - mu
    var = (centered * centered).mean(axis=0)
    return ProbEmbedding(mu, np.log(var + TEACHER_VAR_FLOOR))


def uncertainty_scalar(z: ProbEmbedding) -> float:
    """Mean of the variance vector; the scalar used for median splits."""
    return float(np.mean(z.var))
