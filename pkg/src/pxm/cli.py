"""Command-line entry point: synth, train and eval subcommands.

Exit codes: 0 success, 2 usage or config error, 3 numeric failure,
4 invariant violation during evaluation.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

from .autodiff import NumericError, load_checkpoint
from .evaluate import (
    InvariantViolation,
    ablation_run,
    run_probe,
    run_retrieval,
    run_window,
    run_zeroshot,
)
from .figures import (
    plot_ablation_bars,
    plot_subgroup_bars,
    plot_training_curves,
    plot_uncertainty_trace,
)
from .synthdata import CohortConfig, generate_cohort, load_cohort, save_cohort
from .train import Model, TrainConfig, build_model, fit

__all__ = ["main", "ConfigError", "EXIT_USAGE", "EXIT_NUMERIC", "EXIT_INVARIANT"]

EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_INVARIANT = 4

EVAL_TASKS = ("zeroshot", "probe", "retrieve", "window", "ablate")


class ConfigError(ValueError):
    """Bad or unknown configuration; message names the offending field."""


@dataclasses.dataclass
class EvalConfig:
    label: str = "class"                  # zeroshot/probe target
    probe_fraction: float = 1.0
    ablation_seeds: tuple = (1, 2, 3, 4, 5)
    ablation_variants: tuple = ("infonce", "infonce+teacher", "pcme", "pcme+teacher")

    def __post_init__(self):
        if self.label not in ("class", "lvef"):
            raise ValueError(f"label must be 'class' or 'lvef', got {self.label!r}")
        if not 0.0 < self.probe_fraction <= 1.0:
            raise ValueError(f"probe_fraction must lie in (0, 1], got {self.probe_fraction}")


_TUPLE_KEYS = ("noise_grades", "lvef_low_classes", "ablation_seeds",
               "ablation_variants", "block_widths", "block_strides")


def _build_section(cls, data: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key '{section}.{unknown[0]}'")
    kwargs = {k: tuple(v) if k in _TUPLE_KEYS and v is not None else v
              for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad '{section}' config: {exc}") from exc


def load_config(path) -> dict:
    """Parse the run config JSON into cohort/train/eval sections with
    full defaulting and strict unknown-key rejection."""
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    unknown = sorted(set(raw) - {"cohort", "train", "eval"})
    if unknown:
        raise ConfigError(f"unknown config section '{unknown[0]}'")
    return {
        "cohort": _build_section(CohortConfig, raw.get("cohort", {}), "cohort"),
        "train": _build_section(TrainConfig, raw.get("train", {}), "train"),
        "eval": _build_section(EvalConfig, raw.get("eval", {}), "eval"),
    }


# -- run manifest -----------------------------------------------------------------


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def write_run_manifest(out_dir: Path, command: str, config_path, configs: dict,
                       seed, extra: dict | None = None) -> Path:
    artifacts = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != "run.json":
            artifacts[str(path.relative_to(out_dir))] = _sha256(path)
    manifest = {
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "config": {name: dataclasses.asdict(cfg) for name, cfg in configs.items()},
        "seed": seed,
        "out_dir": str(out_dir),
        "artifacts": artifacts,
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "run.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def _write_csv(rows: list[dict], path: Path) -> None:
    if not rows:
        path.write_text("")
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                             for k, v in row.items()})


# -- subcommands -----------------------------------------------------------------------


def cmd_synth(args) -> int:
    configs = load_config(args.config)
    cohort_cfg = configs["cohort"]
    if args.seed is not None:
        cohort_cfg = dataclasses.replace(cohort_cfg, seed=args.seed)
        configs["cohort"] = cohort_cfg
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cohort = generate_cohort(cohort_cfg)
    save_cohort(cohort, out)
    write_run_manifest(out, "synth", args.config, configs, cohort_cfg.seed)
    print(f"wrote cohort of {len(cohort.samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    configs = load_config(args.config)
    train_cfg = configs["train"]
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    if args.loss_variant is not None:
        train_cfg = dataclasses.replace(train_cfg, loss_variant=args.loss_variant)
    if args.lam is not None:
        try:
            train_cfg = dataclasses.replace(train_cfg, lam=args.lam)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    configs["train"] = train_cfg
    cohort = load_cohort(args.cohort)
    configs["cohort"] = cohort.config
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = fit(cohort, train_cfg, out)
    plot_training_curves(result.metrics, out / "curves.png")
    write_run_manifest(out, "train", args.config, configs, train_cfg.seed,
                       extra={"cohort_dir": str(args.cohort),
                              "best_epoch": result.best_epoch})
    last = result.metrics[-1] if result.metrics else None
    tail = f", final L_total={last[4]:.4f}" if last else ""
    print(f"trained {train_cfg.loss_variant} for {train_cfg.epochs} epochs{tail}")
    print(f"checkpoints and metrics under {out}")
    return 0


def _restore_model(checkpoint_path, cohort) -> Model:
    ckpt = Path(checkpoint_path)
    run_json = ckpt.parent / "run.json"
    if not run_json.exists():
        raise ConfigError(f"no run.json next to checkpoint {ckpt}")
    with open(run_json) as fh:
        manifest = json.load(fh)
    train_cfg = _build_section(TrainConfig, manifest["config"]["train"], "train")
    model = build_model(train_cfg, vocab_size=cohort.config.vocab_size)
    model.params.load_values(load_checkpoint(ckpt))
    return model


def cmd_eval(args) -> int:
    configs = load_config(args.config)
    eval_cfg = configs["eval"]
    seed = args.seed if args.seed is not None else 0
    cohort = load_cohort(args.cohort)
    configs["cohort"] = cohort.config
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.task != "ablate":
        if args.checkpoint is None:
            raise ConfigError(f"task '{args.task}' needs --checkpoint")
        model = _restore_model(args.checkpoint, cohort)
        configs["train"] = model.cfg

    if args.task == "zeroshot":
        report, per_sample = run_zeroshot(model, cohort, label=eval_cfg.label, seed=seed)
        _write_csv(report.rows(), out / "report.csv")
        _write_csv(per_sample, out / "per_sample.csv")
        plot_subgroup_bars(report.rows(), "balanced_accuracy", out / "report.png")
    elif args.task == "probe":
        report, per_sample = run_probe(model, cohort, fraction=eval_cfg.probe_fraction,
                                       label=eval_cfg.label, seed=seed)
        _write_csv(report.rows(), out / "report.csv")
        _write_csv(per_sample, out / "per_sample.csv")
        plot_subgroup_bars(report.rows(), "balanced_accuracy", out / "report.png")
    elif args.task == "retrieve":
        ks = (1, args.k) if args.k and args.k != 1 else (1,)
        report, per_sample = run_retrieval(model, cohort, ks=ks, seed=seed)
        _write_csv(report.rows(), out / "report.csv")
        _write_csv(per_sample, out / "per_sample.csv")
        plot_subgroup_bars(report.rows(), f"recall@{ks[-1]}", out / "report.png")
    elif args.task == "window":
        report, rows = run_window(model, cohort, stride_seconds=args.stride,
                                  workers=args.workers, seed=seed)
        _write_csv(report.rows(), out / "report.csv")
        trace_rows = [{"sample_id": r["sample_id"], "window_offset_s": t,
                       "uncertainty": u}
                      for r in rows for t, u in r["trace"]]
        _write_csv(trace_rows, out / "traces.csv")
        first = cohort.samples[0]
        win_s = model.ecg.cfg.samples / 100.0
        plot_uncertainty_trace(first.signal.data[0], first.signal.fs,
                               rows[0]["trace"], win_s, out / "trace.png",
                               burst_span=first.burst_span)
    elif args.task == "ablate":
        train_cfg = configs["train"]
        if args.loss_variant is not None:
            raise ConfigError("--loss-variant does not apply to task 'ablate'")
        runs, summary = ablation_run(cohort, train_cfg,
                                     seeds=eval_cfg.ablation_seeds,
                                     variants=eval_cfg.ablation_variants)
        _write_csv(runs, out / "runs.csv")
        _write_csv(summary, out / "summary.csv")
        plot_ablation_bars(summary, out / "summary.png")
    else:  # unreachable behind argparse choices
        raise ConfigError(f"unknown task {args.task!r}")

    write_run_manifest(out, f"eval:{args.task}", args.config, configs, seed,
                       extra={"cohort_dir": str(args.cohort),
                              "checkpoint": str(args.checkpoint) if args.checkpoint else None})
    print(f"eval task '{args.task}' complete; reports under {out}")
    return 0


# -- argument parsing --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pxm",
        description="Probabilistic cross-modal ECG embeddings: synthesize "
                    "cohorts, train the dual-head encoders, run evaluations.")
    parser.add_argument("--kors-matrix", default=None,
                        help="path to a 3x8 Kors matrix CSV (overrides the built-in)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic paired cohort")
    p_synth.add_argument("--config", default=None)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train encoders on a cohort")
    p_train.add_argument("--cohort", required=True)
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--loss-variant", dest="loss_variant", default=None,
                         choices=("infonce", "infonce+teacher", "pcme", "pcme+teacher"))
    p_train.add_argument("--lambda", dest="lam", type=float, default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a cohort")
    p_eval.add_argument("--task", required=True, choices=EVAL_TASKS)
    p_eval.add_argument("--cohort", required=True)
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--config", default=None)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--k", type=int, default=10)
    p_eval.add_argument("--stride", type=float, default=5.0)
    p_eval.add_argument("--workers", type=int, default=1)
    p_eval.add_argument("--loss-variant", dest="loss_variant", default=None)
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.kors_matrix:
        os.environ["PXM_KORS_MATRIX"] = args.kors_matrix
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
