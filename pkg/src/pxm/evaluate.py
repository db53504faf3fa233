"""Evaluation protocols: zero-shot prompts, linear probing, retrieval,
uncertainty splits and window selection, plus the ablation grid.

Predictions always use the mu embedding; the variance vector only feeds
the uncertainty scalar used for splitting and window selection. All
routines here run on frozen parameters and plain numpy values.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .models import pad_token_batch
from .prob_embed import ProbEmbedding, uncertainty_scalar
from .signal import Signal, decimate, sliding_windows, zscore_normalize
from .synthdata import Cohort
from .train import MODEL_FS, Model, TrainConfig, fit, prepare_windows

__all__ = [
    "InvariantViolation",
    "EvalReport",
    "zeroshot_classify",
    "linear_probe",
    "recall_at_k",
    "balanced_accuracy",
    "binary_entropy",
    "median_split",
    "select_window",
    "make_window_embedder",
    "cross_modal_similarity",
    "encode_ecg",
    "encode_prompts",
    "run_zeroshot",
    "run_probe",
    "run_retrieval",
    "run_window",
    "ablation_run",
]


class InvariantViolation(RuntimeError):
    """An evaluation-time contract was broken; commands exit nonzero on it."""


@dataclass
class EvalReport:
    task: str
    metrics: dict
    subgroups: dict = field(default_factory=dict)   # name -> {"n": int, <metric>: float}
    seed: int = 0
    config_hash: str = ""
    notes: list = field(default_factory=list)

    def validate(self) -> "EvalReport":
        for key, value in self.metrics.items():
            if not (0.0 <= value <= 1.0) or not np.isfinite(value):
                raise InvariantViolation(f"{self.task}: metric {key}={value} outside [0, 1]")
        if self.subgroups:
            low = self.subgroups.get("low_uncertainty", {}).get("n", 0)
            high = self.subgroups.get("high_uncertainty", {}).get("n", 0)
            total = self.subgroups.get("all", {}).get("n", low + high)
            if low + high != total:
                raise InvariantViolation(
                    f"{self.task}: subgroup sizes {low}+{high} != {total}")
        return self

    def rows(self) -> list:
        seen = set()
        out = []
        for group, vals in sorted(self.subgroups.items()):
            for k, v in sorted(vals.items()):
                seen.add((group, k))
                out.append({"task": self.task, "group": group, "metric": k,
                            "value": v, "seed": self.seed,
                            "config_hash": self.config_hash})
        for k, v in sorted(self.metrics.items()):
            if ("all", k) not in seen:
                out.append({"task": self.task, "group": "all", "metric": k,
                            "value": v, "seed": self.seed,
                            "config_hash": self.config_hash})
        return out


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# -- primitive metrics ------------------------------------------------------------


def zeroshot_classify(ecg_z: ProbEmbedding, prompts: list) -> int:
    """Nearest text prompt by cosine on mu; per class the best prompt counts,
    ties go to the lowest class index."""
    if len(prompts) < 2:
        raise ValueError("zero-shot needs at least 2 classes of prompts")
    best_cls, best_score = 0, -np.inf
    for cls, plist in enumerate(prompts):
        if not plist:
            raise ValueError(f"class {cls} has no prompts")
        score = max(_cosine(ecg_z.mu, p.mu) for p in plist)
        if score > best_score:
            best_cls, best_score = cls, score
    return best_cls


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def linear_probe(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray,
                 max_iters: int = 10_000, grad_tol: float = 1e-6):
    """Multinomial logistic regression by full-batch gradient descent.

    Runs until the gradient norm drops below ``grad_tol`` or ``max_iters``
    passes. Returns (predicted labels, class probabilities) on test_x with
    probability columns ordered by sorted unique train label.
    """
    train_y = np.asarray(train_y)
    classes = np.unique(train_y)
    if classes.size < 2:
        raise ValueError("linear probe needs at least 2 classes in training data")
    n, d = train_x.shape
    x1 = np.concatenate([train_x, np.ones((n, 1))], axis=1)
    y_idx = np.searchsorted(classes, train_y)
    onehot = np.eye(classes.size)[y_idx]
    # 1/L step with L an upper bound on the softmax-NLL Hessian norm.
    lmax = float(np.linalg.eigvalsh(x1.T @ x1)[-1])
    step = 1.0 / (0.5 * lmax / n + 1e-12)
    w = np.zeros((d + 1, classes.size))
    for _ in range(max_iters):
        logits = x1 @ w
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = x1.T @ (p - onehot) / n
        if np.linalg.norm(grad) < grad_tol:
            break
        w -= step * grad
    t1 = np.concatenate([test_x, np.ones((len(test_x), 1))], axis=1)
    logits = t1 @ w
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    preds = classes[np.argmax(probs, axis=1)]
    return preds, probs


def recall_at_k(similarity: np.ndarray, match: np.ndarray, k: int) -> float:
    """Fraction of query rows whose top-k columns contain a true match;
    equal similarities rank by lower column index."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    similarity = np.asarray(similarity, dtype=np.float64)
    match = np.asarray(match)
    if similarity.shape != match.shape:
        raise ValueError(f"similarity {similarity.shape} vs match {match.shape}")
    m, n = similarity.shape
    cols = np.arange(n)
    hits = 0
    for i in range(m):
        order = np.lexsort((cols, -similarity[i]))
        hits += bool(match[i, order[: min(k, n)]].any())
    return hits / m


def balanced_accuracy(preds, labels) -> float:
    """Unweighted mean of per-class recall over classes observed in labels."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("balanced accuracy needs at least one sample")
    recalls = []
    for cls in np.unique(labels):
        mask = labels == cls
        recalls.append(float(np.mean(preds[mask] == cls)))
    return float(np.mean(recalls))


def binary_entropy(p: float) -> float:
    """Entropy in bits of a Bernoulli(p), with 0 log 0 = 0."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability must lie in [0, 1], got {p}")
    h = 0.0
    if 0.0 < p < 1.0:
        h = -(p * np.log2(p) + (1.0 - p) * np.log2(1.0 - p))
    return float(h)


def median_split(uncertainties) -> tuple[np.ndarray, np.ndarray]:
    """Indices at or below the median go low, the rest high."""
    values = np.asarray(uncertainties, dtype=np.float64)
    if values.size == 0:
        raise ValueError("median split of an empty list")
    med = float(np.median(values))
    idx = np.arange(values.size)
    return idx[values <= med], idx[values > med]


# -- window selection ----------------------------------------------------------------


def make_window_embedder(model: Model):
    """Preprocess-and-encode closure mapping a 10-s Signal to a ProbEmbedding."""
    n_samples = model.ecg.cfg.samples

    def embed(window: Signal) -> ProbEmbedding:
        sig = window if window.fs == MODEL_FS else decimate(window, MODEL_FS)
        sig = zscore_normalize(sig)
        if sig.n_samples != n_samples:
            sig = Signal(sig.data[:, :n_samples], sig.fs, list(sig.lead_names))
        return model.ecg.encode(sig.data[None], model.params)[0]

    return embed


def select_window(long_signal: Signal, embed, win_seconds: float = 10.0,
                  stride_seconds: float = 5.0, workers: int = 1):
    """Embed every sliding window, return (argmin-uncertainty index, trace).

    The trace is a list of (offset seconds, uncertainty scalar); ties pick
    the earliest window.
    """
    windows = sliding_windows(long_signal, win_seconds, stride_seconds)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            embeddings = list(pool.map(embed, windows))
    else:
        embeddings = [embed(w) for w in windows]
    trace = [(i * stride_seconds, uncertainty_scalar(z))
             for i, z in enumerate(embeddings)]
    best = int(np.argmin([u for _, u in trace]))
    return best, trace


# -- encoding helpers -----------------------------------------------------------------


def encode_ecg(model: Model, samples, chunk: int = 64):
    """Frozen forward over sample windows; returns (mu, log_var) stacks."""
    windows = prepare_windows(samples, model.ecg.cfg.samples)
    mus, lvs = [], []
    for i in range(0, len(windows), chunk):
        zs = model.ecg.encode(windows[i : i + chunk], model.params)
        mus.extend(z.mu for z in zs)
        lvs.extend(z.log_var for z in zs)
    return np.stack(mus), np.stack(lvs)


def encode_texts(model: Model, token_lists, chunk: int = 64):
    mus, lvs = [], []
    for i in range(0, len(token_lists), chunk):
        batch = pad_token_batch(token_lists[i : i + chunk])
        zs = model.txt.encode(batch, model.params)
        mus.extend(z.mu for z in zs)
        lvs.extend(z.log_var for z in zs)
    return np.stack(mus), np.stack(lvs)


def encode_prompts(model: Model, class_prompts) -> list:
    out = []
    for plist in class_prompts:
        mu, lv = encode_texts(model, list(plist))
        out.append([ProbEmbedding(m, v) for m, v in zip(mu, lv)])
    return out


def cross_modal_similarity(mu_q, lv_q, mu_c, lv_c, probabilistic: bool) -> np.ndarray:
    """Query-by-candidate similarity: negative CSD for probabilistic models,
    cosine on mu otherwise."""
    if not probabilistic:
        qn = mu_q / np.linalg.norm(mu_q, axis=1, keepdims=True)
        cn = mu_c / np.linalg.norm(mu_c, axis=1, keepdims=True)
        return qn @ cn.T
    sq_q = np.sum(mu_q**2, axis=1, keepdims=True)
    sq_c = np.sum(mu_c**2, axis=1, keepdims=True)
    mu_term = sq_q + sq_c.T - 2.0 * (mu_q @ mu_c.T)
    var_term = np.sum(np.exp(lv_q), axis=1, keepdims=True) + \
        np.sum(np.exp(lv_c), axis=1, keepdims=True).T
    return -(mu_term + var_term)


def _uncertainties(lv: np.ndarray) -> np.ndarray:
    return np.exp(lv).mean(axis=1)


def _grade_means(samples, u: np.ndarray) -> dict:
    grades = sorted({s.noise_grade for s in samples})
    return {g: float(np.mean([u[i] for i, s in enumerate(samples) if s.noise_grade == g]))
            for g in grades}


# -- protocol runners ------------------------------------------------------------------


def _split_report(metric_name, per_sample_correct, u):
    low_idx, high_idx = median_split(u)
    correct = np.asarray(per_sample_correct, dtype=np.float64)
    subgroups = {"all": {"n": int(correct.size)}}
    notes = []
    if high_idx.size == 0:
        notes.append("degenerate uncertainty split: all values at or below median")
    for name, idx in (("low_uncertainty", low_idx), ("high_uncertainty", high_idx)):
        entry = {"n": int(idx.size)}
        if idx.size:
            entry[metric_name] = float(np.mean(correct[idx]))
        subgroups[name] = entry
    return subgroups, notes


def run_zeroshot(model: Model, cohort: Cohort, label: str = "class",
                 seed: int = 0) -> tuple[EvalReport, list]:
    """Zero-shot classification on the test split with a sigma^2 median split.

    ``label`` is "class" (C-way over class prompts) or "lvef" (binary, the
    class prompts pooled by LVEF group).
    """
    test = cohort.split("test")
    if not test:
        raise ValueError("cohort has no test samples")
    mu_e, lv_e = encode_ecg(model, test)
    prompts = encode_prompts(model, cohort.class_prompts)
    if label == "class":
        labels = [s.class_label for s in test]
        grouped = prompts
    elif label == "lvef":
        mapping = cohort.config.lvef_map()
        grouped = [[], []]
        for cls, plist in enumerate(prompts):
            grouped[mapping[cls]].extend(plist)
        labels = [s.lvef_binary for s in test]
    else:
        raise ValueError(f"unknown zero-shot label {label!r}")

    preds = [zeroshot_classify(ProbEmbedding(m, v), grouped)
             for m, v in zip(mu_e, lv_e)]
    u = _uncertainties(lv_e)
    labels_arr = np.asarray(labels)
    preds_arr = np.asarray(preds)
    bacc = balanced_accuracy(preds_arr, labels_arr)

    low_idx, high_idx = median_split(u)
    subgroups = {"all": {"n": len(test), "balanced_accuracy": bacc}}
    notes = []
    for name, idx in (("low_uncertainty", low_idx), ("high_uncertainty", high_idx)):
        entry = {"n": int(idx.size)}
        if idx.size:
            entry["balanced_accuracy"] = balanced_accuracy(preds_arr[idx], labels_arr[idx])
        subgroups[name] = entry
    if high_idx.size == 0:
        notes.append("degenerate uncertainty split")

    per_sample = [{
        "sample_id": s.sample_id, "label": int(y), "pred": int(p),
        "correct": int(p == y), "uncertainty": float(ui),
        "noise_grade": s.noise_grade,
    } for s, y, p, ui in zip(test, labels_arr, preds_arr, u)]
    report = EvalReport(task=f"zeroshot_{label}",
                        metrics={"balanced_accuracy": bacc},
                        subgroups=subgroups, seed=seed,
                        config_hash=config_hash(model.cfg.__dict__),
                        notes=notes).validate()
    return report, per_sample


def run_probe(model: Model, cohort: Cohort, fraction: float = 1.0,
              label: str = "lvef", seed: int = 0) -> tuple[EvalReport, list]:
    """Few-shot linear probing on frozen mu embeddings.

    ``fraction`` mirrors the 10%/100% presets; subgroup splits come from
    sigma^2 and, for binary labels, the entropy-threshold baseline.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    train = cohort.split("train")
    test = cohort.split("test")
    if not train or not test:
        raise ValueError("probe needs both train and test splits")
    rng = np.random.default_rng([seed, 33301])
    n_keep = max(2, int(round(fraction * len(train))))
    keep = rng.permutation(len(train))[:n_keep]
    train_kept = [train[i] for i in keep]

    get_label = (lambda s: s.class_label) if label == "class" else (lambda s: s.lvef_binary)
    mu_tr, _ = encode_ecg(model, train_kept)
    mu_te, lv_te = encode_ecg(model, test)
    y_tr = np.array([get_label(s) for s in train_kept])
    y_te = np.array([get_label(s) for s in test])
    preds, probs = linear_probe(mu_tr, y_tr, mu_te)
    bacc = balanced_accuracy(preds, y_te)
    u = _uncertainties(lv_te)

    correct = (preds == y_te).astype(float)
    subgroups, notes = _split_report("accuracy", correct, u)
    subgroups["all"]["balanced_accuracy"] = bacc
    low_idx, high_idx = median_split(u)
    for name, idx in (("low_uncertainty", low_idx), ("high_uncertainty", high_idx)):
        if idx.size:
            subgroups[name]["balanced_accuracy"] = balanced_accuracy(preds[idx], y_te[idx])

    per_sample = []
    classes = np.unique(y_tr)
    for i, s in enumerate(test):
        row = {"sample_id": s.sample_id, "label": int(y_te[i]), "pred": int(preds[i]),
               "correct": int(preds[i] == y_te[i]), "uncertainty": float(u[i]),
               "noise_grade": s.noise_grade}
        if classes.size == 2:
            p1 = float(probs[i, 1])
            row["prob_positive"] = p1
            row["entropy_bits"] = binary_entropy(p1)
        per_sample.append(row)
    if classes.size == 2:
        ent = np.array([r["entropy_bits"] for r in per_sample])
        for name, mask in (("low_entropy", ent <= 0.5), ("high_entropy", ent > 0.5)):
            entry = {"n": int(mask.sum())}
            if mask.any():
                entry["balanced_accuracy"] = balanced_accuracy(preds[mask], y_te[mask])
            subgroups[name] = entry

    report = EvalReport(task=f"probe_{label}_{int(fraction * 100)}pct",
                        metrics={"balanced_accuracy": bacc},
                        subgroups=subgroups, seed=seed,
                        config_hash=config_hash(model.cfg.__dict__),
                        notes=notes)
    # Entropy subgroups are not halves, so validate only the sigma split.
    low = subgroups["low_uncertainty"]["n"]
    high = subgroups["high_uncertainty"]["n"]
    if low + high != subgroups["all"]["n"]:
        raise InvariantViolation("probe: sigma split does not partition the test set")
    return report, per_sample


def run_retrieval(model: Model, cohort: Cohort, ks=(1, 10),
                  seed: int = 0) -> tuple[EvalReport, list]:
    """Text-to-ECG retrieval over the test split with sigma^2 splits."""
    test = cohort.split("test")
    if not test:
        raise ValueError("cohort has no test samples")
    mu_e, lv_e = encode_ecg(model, test)
    mu_t, lv_t = encode_texts(model, [s.tokens for s in test])
    sims = cross_modal_similarity(mu_t, lv_t, mu_e, lv_e, model.cfg.probabilistic)
    match = np.eye(len(test))
    u = _uncertainties(lv_e)
    metrics = {f"recall@{k}": recall_at_k(sims, match, k) for k in ks}

    low_idx, high_idx = median_split(u)
    subgroups = {"all": {"n": len(test), **metrics}}
    for name, idx in (("low_uncertainty", low_idx), ("high_uncertainty", high_idx)):
        entry = {"n": int(idx.size)}
        if idx.size:
            sub = sims[np.ix_(idx, idx)]
            for k in ks:
                entry[f"recall@{k}"] = recall_at_k(sub, np.eye(idx.size), k)
        subgroups[name] = entry

    per_sample = []
    cols = np.arange(len(test))
    for i, s in enumerate(test):
        order = np.lexsort((cols, -sims[i]))
        rank = int(np.where(order == i)[0][0]) + 1
        per_sample.append({"sample_id": s.sample_id, "rank_of_match": rank,
                           "uncertainty": float(u[i]), "noise_grade": s.noise_grade})
    report = EvalReport(task="retrieval_text_to_ecg", metrics=metrics,
                        subgroups=subgroups, seed=seed,
                        config_hash=config_hash(model.cfg.__dict__)).validate()
    return report, per_sample


def run_window(model: Model, cohort: Cohort, stride_seconds: float = 5.0,
               workers: int = 1, seed: int = 0) -> tuple[EvalReport, list]:
    """Select the least-uncertain window per record; scores burst exclusion
    against the generator annotations when present."""
    embed = make_window_embedder(model)
    records = cohort.samples
    if not records:
        raise ValueError("cohort has no records")
    rows = []
    excluded = []
    win_s = model.ecg.cfg.samples / MODEL_FS
    for s in records:
        idx, trace = select_window(s.signal, embed, win_s, stride_seconds,
                                   workers=workers)
        start = idx * stride_seconds
        row = {"sample_id": s.sample_id, "selected_window": idx,
               "selected_start_s": start,
               "trace": [(float(t), float(u)) for t, u in trace]}
        if s.burst_span is not None:
            b0, b1 = s.burst_span
            outside = (start + win_s <= b0) or (start >= b1)
            row["burst_excluded"] = bool(outside)
            excluded.append(outside)
        rows.append(row)
    metrics = {}
    if excluded:
        metrics["burst_excluded_fraction"] = float(np.mean(excluded))
    report = EvalReport(task="window_selection", metrics=metrics,
                        subgroups={"all": {"n": len(records), **metrics}},
                        seed=seed,
                        config_hash=config_hash(model.cfg.__dict__)).validate()
    return report, rows


def ablation_run(cohort: Cohort, base_cfg: TrainConfig, seeds,
                 variants=("infonce", "infonce+teacher", "pcme", "pcme+teacher"),
                 progress=None) -> tuple[list, list]:
    """Train every variant with identical data and batching per seed;
    report zero-shot balanced accuracy and text-to-ECG R@1.

    Returns (per-run rows, per-variant summary rows with mean and sd).
    """
    seeds = list(seeds)
    if len(seeds) < 1:
        raise ValueError("ablation needs at least one seed")
    rows = []
    for variant in variants:
        for seed in seeds:
            lam = base_cfg.lam if variant.endswith("+teacher") else 1.0
            cfg = replace(base_cfg, loss_variant=variant, seed=seed, lam=lam)
            result = fit(cohort, cfg, None)
            zs, _ = run_zeroshot(result.model, cohort, label="class", seed=seed)
            ret, _ = run_retrieval(result.model, cohort, ks=(1,), seed=seed)
            row = {"variant": variant, "seed": seed,
                   "zs_balanced_accuracy": zs.metrics["balanced_accuracy"],
                   "recall@1": ret.metrics["recall@1"]}
            rows.append(row)
            if progress is not None:
                progress(row)
    summary = []
    for variant in variants:
        sub = [r for r in rows if r["variant"] == variant]
        entry = {"variant": variant, "n_seeds": len(sub)}
        for key in ("zs_balanced_accuracy", "recall@1"):
            values = np.array([r[key] for r in sub])
            entry[f"{key}_mean"] = float(values.mean())
            entry[f"{key}_sd"] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        summary.append(entry)
    return rows, summary
