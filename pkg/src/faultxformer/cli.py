"""Command-line entry point: ``faultxformer <subcommand> [flags]``.

Settings resolve as flags > ``--config`` file > ``FAULTXFORMER_SEED`` (seed only)
> built-in defaults, and the resolved set is echoed into ``<subcommand>.manifest``
in the run directory. That file can be fed back through ``--config``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

SUBCOMMANDS = {
    "generate": "write a synthetic PMU dataset (CSV + manifest)",
    "train-extractor": "train the stage-1 feature extractor on every row of a dataset",
    "cv": "k-fold cross-validation of stage 2 on frozen stage-1 encodings",
    "train": "train a stage-2 classifier on a dataset and save it",
    "eval": "score saved stage-1 + stage-2 checkpoints on a dataset",
    "noise-sweep": "accuracy under increasing Gaussian measurement noise",
    "der-sweep": "accuracy across DER penetration levels, both tasks",
    "ablate": "one-factor-at-a-time hyperparameter grid",
    "attn": "export averaged final-layer attention (CSV + PGM)",
    "bench": "single-threaded inference latency benchmark",
}
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
               "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")
ECHO_SKIP = ("subcommand", "config")


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    subcommand: str = ""
    config: str = ""
    run_dir: str = ""
    out_root: str = "runs"
    seed: int = 0
    threads: int = 1
    task: str = "type"
    data: str = ""
    out: str = ""
    per_cell: int = 1
    resistances: str = "0.01,10"
    angles: str = "0,90"
    der: str = "0"
    noise: float = 0.0
    full_grid: bool = False
    scope: str = "dataset"
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 0
    extractor_epochs: int = 0
    patience: int = 0
    dropout: float = 0.1
    folds: int = 10
    extractor: str = ""
    classifier: str = ""
    checkpoint_precision: str = "f32"
    levels: str = ""
    evaluate_only: bool = False
    axis: str = "all"
    trials: int = 100
    warmup: int = 10

    def floats(self, name: str) -> tuple[float, ...]:
        raw = getattr(self, name)
        try:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        except ValueError:
            raise UsageError(f"--{name.replace('_', '-')}: expected comma-separated numbers, "
                             f"got {raw!r}") from None

    def echo(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k not in ECHO_SKIP}


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _convert(name: str, raw: str, source: str):
    kind = type(getattr(_DEFAULTS, name))
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off", ""):
            return False
        raise UsageError(f"{source}: {name} expects true/false, got {raw!r}")
    try:
        return kind(raw.strip()) if kind is not str else raw
    except ValueError:
        raise UsageError(f"{source}: {name} expects {kind.__name__}, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="faultxformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", metavar="subcommand")
    sub.required = True
    for name, help_text in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text,
                           argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="key=value settings file (flags override it)")
        p.add_argument("--run-dir", help="directory for every artifact of this run")
        p.add_argument("--out-root", help="parent of auto-named run directories")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="numeric library threads (default 1)")
        p.add_argument("--task", choices=("type", "location"))
        if name in ("generate", "noise-sweep", "der-sweep", "ablate"):
            p.add_argument("--per-cell", type=int, help="replicates per grid cell")
            p.add_argument("--resistances", help="comma-separated fault resistances (ohm)")
            p.add_argument("--angles", help="comma-separated inception angles (deg)")
            p.add_argument("--full-grid", action="store_true", help="7 resistances x 7 angles")
        if name == "generate":
            p.add_argument("--out", help="dataset CSV path")
            p.add_argument("--der", help="comma-separated DER levels (%%)")
            p.add_argument("--noise", type=float, help="Gaussian noise (%% of channel std)")
        if name in ("train-extractor", "cv", "train", "eval", "attn", "ablate"):
            p.add_argument("--data", help="dataset CSV written by `generate`")
        if name in ("cv", "train", "eval", "attn", "bench"):
            p.add_argument("--extractor", help="stage-1 checkpoint")
        if name in ("eval", "attn", "bench"):
            p.add_argument("--classifier", help="stage-2 checkpoint")
        if name not in ("generate", "bench", "eval"):
            p.add_argument("--lr", type=float)
            p.add_argument("--batch-size", type=int)
            p.add_argument("--epochs", type=int, help="stage-2 epochs (0: 200 type / 250 location)")
            p.add_argument("--extractor-epochs", type=int, help="stage-1 epochs (0: as --epochs)")
            p.add_argument("--patience", type=int, help="early-stop patience in epochs (0: off)")
            p.add_argument("--dropout", type=float, help="encoder dropout probability")
            p.add_argument("--scope", choices=("dataset", "sample"), help="z-score scope")
        if name in ("train-extractor", "train"):
            p.add_argument("--checkpoint-precision", choices=("f32", "f64"))
        if name == "cv":
            p.add_argument("--folds", type=int)
        if name in ("noise-sweep", "der-sweep"):
            p.add_argument("--levels", help="comma-separated levels (%%)")
        if name == "noise-sweep":
            p.add_argument("--evaluate-only", action="store_true",
                           help="score the clean model on noisy data instead of retraining")
        if name == "ablate":
            p.add_argument("--axis", choices=("all", "BatchSize", "LatentDim", "Layers", "Heads"))
        if name == "bench":
            p.add_argument("--batch-size", type=int)
            p.add_argument("--trials", type=int)
            p.add_argument("--warmup", type=int)
    return parser


def parse_cli(argv, environ=None) -> RunConfig:
    """Resolve a full :class:`RunConfig` from ``argv`` (flags > file > env seed > defaults)."""
    environ = os.environ if environ is None else environ
    ns = vars(build_parser().parse_args(argv))
    values = asdict(RunConfig())
    if environ.get("FAULTXFORMER_SEED"):
        values["seed"] = _convert("seed", environ["FAULTXFORMER_SEED"], "FAULTXFORMER_SEED")
    if ns.get("config"):
        from .pipeline import parse_kv
        path = Path(ns["config"])
        if not path.is_file():
            raise UsageError(f"--config: no such file {path}")
        try:
            settings = parse_kv(path.read_text(encoding="utf-8"), str(path))
        except ValueError as e:
            raise UsageError(str(e)) from None
        for key, raw in settings.items():
            if key == "code_version":
                continue
            if key not in _FIELDS or key in ECHO_SKIP:
                raise UsageError(f"{path}: unknown setting {key!r}")
            values[key] = _convert(key, raw, str(path))
    for key, val in ns.items():
        values[key.replace("-", "_")] = val
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.task not in ("type", "location"):
        raise UsageError(f"--task: expected type or location, got {cfg.task!r}")
    if cfg.threads < 1:
        raise UsageError("--threads must be >= 1")
    for name in ("epochs", "extractor_epochs", "patience"):
        if getattr(cfg, name) < 0:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 0")
    if cfg.batch_size < 1 or cfg.folds < 2 or cfg.per_cell < 1:
        raise UsageError("--batch-size and --per-cell must be >= 1, --folds >= 2")
    if cfg.lr < 0:
        raise UsageError("--lr must be >= 0")
    if not 0.0 <= cfg.dropout < 1.0:
        raise UsageError("--dropout must be in [0, 1)")
    if cfg.full_grid and (cfg.resistances != _DEFAULTS.resistances
                          or cfg.angles != _DEFAULTS.angles):
        raise UsageError("--full-grid conflicts with --resistances/--angles")
    if cfg.subcommand == "generate" and not cfg.out:
        raise UsageError("generate: --out is required")
    if cfg.subcommand in ("train-extractor", "cv", "train", "eval", "attn") and not cfg.data:
        raise UsageError(f"{cfg.subcommand}: --data is required")
    if cfg.subcommand in ("eval", "attn") and not cfg.classifier:
        raise UsageError(f"{cfg.subcommand}: --classifier is required")
    for name in ("resistances", "angles", "der", "levels"):
        cfg.floats(name)


def apply_threads(n: int) -> None:
    for var in THREAD_VARS:
        os.environ[var] = str(n)


# --- dispatch ----------------------------------------------------------------

def run(cfg: RunConfig) -> int:
    from .experiments import make_run_dir, write_run_manifest

    handler = _HANDLERS[cfg.subcommand]
    if cfg.subcommand != "generate" or cfg.run_dir:
        run_dir = Path(cfg.run_dir) if cfg.run_dir else make_run_dir(
            cfg.out_root, cfg.subcommand, cfg.seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg.run_dir = str(run_dir)
        write_run_manifest(run_dir, cfg.echo(), cfg.seed, name=f"{cfg.subcommand}.manifest")
    handler(cfg)
    return 0


def _generator(cfg: RunConfig, **over):
    from .phasor_sim import INCEPTION_DEG, RESISTANCES_OHM, GeneratorConfig
    grid = dict(resistances=RESISTANCES_OHM, inception_angles=INCEPTION_DEG) if cfg.full_grid \
        else dict(resistances=cfg.floats("resistances"), inception_angles=cfg.floats("angles"))
    kw = dict(grid, der_levels=cfg.floats("der") or (0.0,), per_cell=cfg.per_cell,
              noise_pct=cfg.noise, seed=cfg.seed)
    kw.update(over)
    return GeneratorConfig(**kw)


def _stage_configs(cfg: RunConfig, task: str | None = None):
    from .experiments import StageConfigs
    from .training import DEFAULT_EPOCHS
    task = task or cfg.task
    e2 = cfg.epochs or DEFAULT_EPOCHS[task]
    return StageConfigs(task, cfg.extractor_epochs or e2, e2, cfg.batch_size, cfg.lr, cfg.seed,
                        dropout_p=cfg.dropout)


def _train_config(cfg: RunConfig, stage: int):
    from dataclasses import replace
    tc = _stage_configs(cfg).train_config(stage)
    return replace(tc, patience=cfg.patience or None)


def _out(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.run_dir) / name


def _load_inputs(cfg: RunConfig, stats=None):
    from .pipeline import prepare, read_dataset, task_subset
    path = Path(cfg.data)
    if not path.is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    ds = read_dataset(path)
    from .pipeline import ChannelStats
    stats = stats or ChannelStats.fit(ds)
    return task_subset(prepare(ds, cfg.scope, stats), cfg.task), stats


def _stats_path(ckpt: Path) -> Path:
    return ckpt.with_name(ckpt.name + ".norm")


def _save_stats(stats, path: Path) -> None:
    from .pipeline import format_kv
    path.write_text(format_kv({"mag_mean": repr(float(stats.mean[0])),
                               "mag_std": repr(float(stats.std[0])),
                               "phase_mean": repr(float(stats.mean[1])),
                               "phase_std": repr(float(stats.std[1]))}), encoding="utf-8")


def _load_stats(path: Path):
    from .pipeline import ChannelStats, read_manifest
    if not path.is_file():
        return None
    kv = read_manifest(path)
    return ChannelStats((float(kv["mag_mean"]), float(kv["phase_mean"])),
                        (float(kv["mag_std"]), float(kv["phase_std"])))


def _extractor_path(cfg: RunConfig) -> Path | None:
    if cfg.extractor:
        return Path(cfg.extractor)
    guess = _out(cfg, f"extractor-{cfg.task}.fxf")
    return guess if guess.is_file() else None


def _load_extractor(cfg: RunConfig):
    from .model import load_checkpoint
    path = _extractor_path(cfg)
    if path is None:
        return None, None
    if not path.is_file():
        raise FileNotFoundError(f"extractor checkpoint not found: {path}")
    return load_checkpoint(path), _load_stats(_stats_path(path))


def _cmd_generate(cfg: RunConfig) -> None:
    from .phasor_sim import build_dataset
    out = Path(cfg.out)
    if cfg.run_dir and not out.is_absolute():
        out = Path(cfg.run_dir) / out
    out.parent.mkdir(parents=True, exist_ok=True)
    m = build_dataset(_generator(cfg), out)
    print(f"wrote {m.n_rows} rows to {out}")


def _cmd_train_extractor(cfg: RunConfig) -> None:
    from .model import save_checkpoint
    from .training import fit_extractor
    inputs, stats = _load_inputs(cfg)
    ext, _ = _stage_configs(cfg).build()
    ext, res = fit_extractor(inputs.features, inputs.labels(cfg.task), _train_config(cfg, 1),
                             extractor=ext)
    path = _out(cfg, f"extractor-{cfg.task}.fxf")
    save_checkpoint(ext, path, cfg.checkpoint_precision)
    _save_stats(stats, _stats_path(path))
    print(f"stage 1 ({cfg.task}): best val F1 {res.best_val_f1:.4f} at epoch {res.best_epoch}; "
          f"saved {path}")
    print("note: stage 1 saw every row, so later CV folds share it (two-stage leakage caveat)")


def _extractor_for(cfg: RunConfig):
    """Saved extractor when available, otherwise one trained on every row of ``--data``."""
    from .training import fit_extractor
    ext, stats = _load_extractor(cfg)
    inputs, stats = _load_inputs(cfg, stats)
    if ext is None:
        ext, _ = _stage_configs(cfg).build()
        ext, _ = fit_extractor(inputs.features, inputs.labels(cfg.task), _train_config(cfg, 1),
                               extractor=ext)
    return ext, inputs, stats


def _cmd_cv(cfg: RunConfig) -> None:
    from dataclasses import replace
    from .training import cross_validate, encode, write_classwise_csv, write_confusion_csv
    from .training import Metrics
    from .phasor_sim import FAULT_TYPES, LOCATION_LABELS
    ext, inputs, _ = _extractor_for(cfg)
    enc = encode(ext, inputs.features)
    sc = _stage_configs(cfg)

    def factory(fold: int):
        return replace(sc, seed=sc.seed + 7 * fold).build()[1]

    report = cross_validate(enc, inputs.labels(cfg.task), _train_config(cfg, 2), k=cfg.folds,
                            model_factory=factory)
    report.write_csv(_out(cfg, f"cv-{cfg.task}.csv"))
    labels = FAULT_TYPES if cfg.task == "type" else LOCATION_LABELS
    pooled = Metrics.from_confusion(report.confusion)
    write_confusion_csv(report.confusion, labels, _out(cfg, f"confusion-{cfg.task}.csv"))
    write_classwise_csv(pooled, labels, _out(cfg, f"classwise-{cfg.task}.csv"))
    mean = report.mean
    print(f"{cfg.folds}-fold CV ({cfg.task}): accuracy {mean[0]:.4f}, F1 {mean[3]:.4f}, "
          f"CoV {100 * report.accuracy_cov:.2f}%")


def _cmd_train(cfg: RunConfig) -> None:
    import numpy as np
    from .model import save_checkpoint
    from .pipeline import stratified_folds
    from .training import encode, train
    ext, inputs, stats = _extractor_for(cfg)
    y = inputs.labels(cfg.task)
    tr, va, te = stratified_folds(y, k=10, seed=cfg.seed).iteration(0)
    tr = np.sort(np.concatenate([tr, te]))  # no held-out test here: every non-validation row trains
    enc = encode(ext, inputs.features)
    _, clf = _stage_configs(cfg).build()
    res = train(clf, enc[tr], y[tr], enc[va], y[va], _train_config(cfg, 2))
    path = _out(cfg, f"classifier-{cfg.task}.fxf")
    save_checkpoint(clf, path, cfg.checkpoint_precision)
    if _extractor_path(cfg) is None:
        ext_path = _out(cfg, f"extractor-{cfg.task}.fxf")
        save_checkpoint(ext, ext_path, cfg.checkpoint_precision)
        _save_stats(stats, _stats_path(ext_path))
    print(f"stage 2 ({cfg.task}): best val F1 {res.best_val_f1:.4f} at epoch {res.best_epoch}; "
          f"saved {path}")


def _dual(cfg: RunConfig):
    from .model import DualStageModel, load_checkpoint
    ext, stats = _load_extractor(cfg)
    if ext is None:
        raise UsageError(f"{cfg.subcommand}: --extractor is required")
    clf_path = Path(cfg.classifier)
    if not clf_path.is_file():
        raise FileNotFoundError(f"classifier checkpoint not found: {clf_path}")
    return DualStageModel(ext, load_checkpoint(clf_path)), stats


def _cmd_eval(cfg: RunConfig) -> None:
    from .experiments import score
    from .phasor_sim import FAULT_TYPES, LOCATION_LABELS
    from .training import write_classwise_csv, write_metrics_csv
    model, stats = _dual(cfg)
    inputs, _ = _load_inputs(cfg, stats)
    m = score(model, inputs.features, inputs.labels(cfg.task), model.classifier.n_classes)
    write_metrics_csv(["all"], [m.row()], _out(cfg, f"eval-{cfg.task}.csv"), first_col="Split")
    labels = FAULT_TYPES if cfg.task == "type" else LOCATION_LABELS
    write_classwise_csv(m, labels[:model.classifier.n_classes], _out(cfg, f"classwise-{cfg.task}.csv"))
    print(f"eval ({cfg.task}): accuracy {m.accuracy:.4f}, F1 {m.macro_f1:.4f}")


def _cmd_noise_sweep(cfg: RunConfig) -> None:
    from .experiments import noise_sweep, write_sweep_csv
    levels = cfg.floats("levels") or (1.0, 2.0, 3.0)
    rows = noise_sweep(_generator(cfg, noise_pct=0.0), _stage_configs(cfg), levels,
                       retrain=not cfg.evaluate_only, scope=cfg.scope)
    write_sweep_csv(rows, _out(cfg, f"noise-{cfg.task}.csv"))
    for r in rows:
        print(f"noise {r.level:g}%: accuracy {r.metrics.accuracy:.4f}")


def _cmd_der_sweep(cfg: RunConfig) -> None:
    from .experiments import der_sweep, write_der_csv
    levels = cfg.floats("levels") or (0.0, 20.0, 40.0, 60.0, 80.0)
    rows = der_sweep(_generator(cfg), _stage_configs(cfg), levels, scope=cfg.scope)
    write_der_csv(rows, _out(cfg, "der.csv"))
    for level, acc in rows:
        print(f"DER {level:g}%: type {acc['type']:.4f}, location {acc['location']:.4f}")


def _cmd_ablate(cfg: RunConfig) -> None:
    from .experiments import (ABLATION_GRID, SweepSpec, ablation, build_inputs,
                              write_ablation_csv)
    if cfg.data:
        inputs, _ = _load_inputs(cfg)
    else:
        inputs, _ = build_inputs(_generator(cfg), cfg.scope)
    axes = tuple(ABLATION_GRID) if cfg.axis == "all" else (cfg.axis,)
    rows = []
    for axis in axes:
        rows += ablation(SweepSpec(axis, base_config=_stage_configs(cfg), seed=cfg.seed), inputs)
    write_ablation_csv(rows, _out(cfg, f"ablation-{cfg.task}.csv"))
    for r in rows:
        acc = f"{r.metrics.accuracy:.4f}" if r.metrics else f"skipped ({r.skipped})"
        print(f"{r.axis}={r.value}: {acc}{' *' if r.best else ''}")


def _cmd_attn(cfg: RunConfig) -> None:
    from .experiments import attention_export
    from .training import encode
    model, stats = _dual(cfg)
    inputs, _ = _load_inputs(cfg, stats)
    model.classifier.capture_attention(True)
    _, ratio = attention_export(model.classifier, encode(model.extractor, inputs.features),
                                cfg.run_dir)
    print(f"attention written to {cfg.run_dir}; onset/off-fault column ratio {ratio:.3f}")


def _cmd_bench(cfg: RunConfig) -> None:
    from .experiments import latency_bench
    from .model import DualStageModel
    if cfg.classifier:
        model, _ = _dual(cfg)
    else:
        ext, clf = _stage_configs(cfg).build()
        model = DualStageModel(ext, clf)
    report = latency_bench(model, cfg.batch_size, cfg.trials, cfg.warmup, cfg.seed)
    report.write_csv(_out(cfg, "latency.csv"))
    print("\n".join(report.lines()))


_HANDLERS = {
    "generate": _cmd_generate, "train-extractor": _cmd_train_extractor, "cv": _cmd_cv,
    "train": _cmd_train, "eval": _cmd_eval, "noise-sweep": _cmd_noise_sweep,
    "der-sweep": _cmd_der_sweep, "ablate": _cmd_ablate, "attn": _cmd_attn, "bench": _cmd_bench,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_cli(argv)
    except SystemExit as e:  # argparse usage errors and --help
        return int(e.code or 0)
    except UsageError as e:
        print(f"faultxformer: error: {e}", file=sys.stderr)
        return 2
    apply_threads(cfg.threads)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return run(cfg)
    except UsageError as e:
        print(f"faultxformer: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - surfaced with the owning module's name
        module = type(e).__module__.replace("faultxformer.", "")
        print(f"faultxformer {cfg.subcommand}: {module}.{type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
