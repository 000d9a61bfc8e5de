"""Study runners: noise and DER sweeps, one-factor ablation, attention export, latency."""
from __future__ import annotations

import copy
import logging
import subprocess
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__
from .model import (TASK_CONFIGS, DualStageModel, FaultXformer, FeatureExtractor, build_stages)
from .numerics.tensor import no_grad
from .phasor_sim import FAULT_OFF, FAULT_ON, F_SYS, GeneratorConfig, generate, sample_times
from .pipeline import (ChannelStats, Dataset, ModelInputs, format_kv, prepare,
                       resample_indices, stratified_folds, task_subset)
from .training import (Metrics, TrainConfig, TrainResult, cross_validate, encode, fit_extractor,
                       train, write_metrics_csv)

log = logging.getLogger(__name__)

AXES = ("NoisePct", "DerPct", "BatchSize", "LatentDim", "Layers", "Heads")
ABLATION_GRID = {
    "BatchSize": (16, 32, 64),
    "LatentDim": (32, 68, 90, 100),
    "Layers": (1, 2, 3),
    "Heads": (2, 4, 5),
}
REFERENCE_CPU_MS_PER_SAMPLE = 2.38
LATENCY_BUDGET_MS = 100.0


class ExperimentError(RuntimeError):
    pass


# --- run directories -----------------------------------------------------------

def code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def make_run_dir(root, experiment: str, seed: int, stamp: str | None = None) -> Path:
    stamp = stamp or datetime.now().strftime("%Y%m%d-%H%M%S")
    path = Path(root) / f"{experiment}-{stamp}-seed{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_run_manifest(run_dir, config: dict, seed: int, name: str = "run.manifest") -> Path:
    items = {"code_version": code_version(), "seed": seed, **config}
    path = Path(run_dir) / name
    path.write_text(format_kv(items), encoding="utf-8")
    return path


# --- shared data + fitting helpers ---------------------------------------------

def build_inputs(config: GeneratorConfig, scope: str = "dataset",
                 stats: ChannelStats | None = None) -> tuple[ModelInputs, ChannelStats]:
    """Generate ``config`` in memory and turn it into normalized model inputs."""
    rows = [(eid, generate(sc, p)) for eid, sc in config.scenarios() for p in config.pmus]
    ds = Dataset.from_sequences(rows)
    stats = stats or ChannelStats.fit(ds)
    return prepare(ds, scope, stats), stats


@dataclass
class StageConfigs:
    """Training setup for both stages; ``stage1_epochs`` may be shorter than stage 2."""

    task: str = "type"
    stage1_epochs: int = 10
    stage2_epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    n_classes: int | None = None
    d_model: int | None = None
    n_heads: int | None = None
    stage2_layers: int | None = None
    dropout_p: float = 0.1
    patience: int | None = None

    def train_config(self, stage: int) -> TrainConfig:
        epochs = self.stage1_epochs if stage == 1 else self.stage2_epochs
        return TrainConfig(self.task, self.lr, self.batch_size, epochs, self.seed, self.patience)

    def build(self) -> tuple[FeatureExtractor, FaultXformer]:
        c1, c2 = TASK_CONFIGS[self.task]
        over = {}
        if self.d_model is not None:
            over["d_model"] = self.d_model
        if self.n_heads is not None:
            over["n_heads"] = self.n_heads
        c1, c2 = replace(c1, **over), replace(c2, **over)
        if self.stage2_layers is not None:
            c2 = replace(c2, n_layers=self.stage2_layers)
        return build_stages(self.task, self.n_classes, self.seed, self.dropout_p,
                            stage1=c1, stage2=c2)


@dataclass
class DualFit:
    model: DualStageModel
    metrics: Metrics
    stage1: TrainResult
    stage2: TrainResult


def holdout_split(labels, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fixed stratified (train, val, test) split: fold 0 of a 10-fold plan."""
    return stratified_folds(labels, k=10, seed=seed).iteration(0)


def fit_dual(inputs: ModelInputs, cfg: StageConfigs, split=None,
             test_inputs: ModelInputs | None = None) -> DualFit:
    """Train stage 1 then stage 2 on the train rows of ``split``; score the test rows.

    Unlike cross-validation, stage 1 never sees the test rows here. ``test_inputs``
    swaps in a different view of the same rows (e.g. a noisy copy) for scoring.
    """
    data = task_subset(inputs, cfg.task)
    y = data.labels(cfg.task)
    tr, va, te = split if split is not None else holdout_split(y, cfg.seed)
    ext, clf = cfg.build()
    r1 = train(ext, data.features[tr], y[tr], data.features[va], y[va], cfg.train_config(1))
    enc_tr, enc_va = encode(ext, data.features[tr]), encode(ext, data.features[va])
    r2 = train(clf, enc_tr, y[tr], enc_va, y[va], cfg.train_config(2))
    model = DualStageModel(ext, clf)
    scored = task_subset(test_inputs, cfg.task) if test_inputs is not None else data
    m = score(model, scored.features[te], scored.labels(cfg.task)[te], clf.n_classes)
    return DualFit(model, m, r1, r2)


def score(model: DualStageModel, x: np.ndarray, y: np.ndarray, n_classes: int,
          batch_size: int = 128) -> Metrics:
    preds = [model.predict(x[s:s + batch_size]) for s in range(0, len(x), batch_size)]
    return Metrics.from_predictions(y, np.concatenate(preds), n_classes)


def desk_cv(inputs: ModelInputs, cfg: StageConfigs, k: int = 10):
    """Stage 1 on every row, frozen encodings, then k-fold CV of stage 2."""
    data = task_subset(inputs, cfg.task)
    y = data.labels(cfg.task)
    ext, _ = cfg.build()
    ext, r1 = fit_extractor(data.features, y, cfg.train_config(1), extractor=ext)
    enc = encode(ext, data.features)

    def factory(fold: int) -> FaultXformer:
        return replace(cfg, seed=cfg.seed + 7 * fold).build()[1]

    report = cross_validate(enc, y, cfg.train_config(2), k=k, model_factory=factory)
    return ext, r1, report


# --- noise sweep -----------------------------------------------------------

@dataclass
class SweepRow:
    level: float
    metrics: Metrics
    model: DualStageModel | None = None


def noise_sweep(gen: GeneratorConfig, cfg: StageConfigs, levels=(1, 2, 3), retrain: bool = True,
                scope: str = "dataset") -> list[SweepRow]:
    """Accuracy per Gaussian noise level; the first row is the clean (level 0) run.

    ``retrain=True`` trains a fresh model on each noisy dataset; otherwise the clean
    model is scored on noisy copies of the same test rows. Normalization statistics
    always come from the clean data so levels share one input scale.
    """
    if not levels:
        raise ExperimentError("noise sweep needs at least one level")
    clean, stats = build_inputs(replace(gen, noise_pct=0.0), scope)
    split = holdout_split(task_subset(clean, cfg.task).labels(cfg.task), cfg.seed)
    base = fit_dual(clean, cfg, split)
    rows = [SweepRow(0.0, base.metrics, base.model)]
    for level in levels:
        if level == 0:
            rows.append(SweepRow(0.0, base.metrics, base.model))
            continue
        noisy, _ = build_inputs(replace(gen, noise_pct=float(level)), scope, stats)
        model = base.model
        if retrain:
            fit = fit_dual(noisy, cfg, split)
            m, model = fit.metrics, fit.model
        else:
            data = task_subset(noisy, cfg.task)
            te = split[2]
            m = score(base.model, data.features[te], data.labels(cfg.task)[te],
                      base.model.classifier.n_classes)
        log.info("noise %.1f%%: acc %.4f", level, m.accuracy)
        rows.append(SweepRow(float(level), m, model))
    return rows


def write_sweep_csv(rows: list[SweepRow], path, first_col: str = "NoisePct") -> None:
    write_metrics_csv([format(r.level, "g") for r in rows], [r.metrics.row() for r in rows],
                      path, first_col=first_col)


# --- DER sweep ---------------------------------------------------------------

def der_sweep(gen: GeneratorConfig, cfg: StageConfigs, levels=(0, 20, 40, 60, 80),
              tasks=("type", "location"), scope: str = "dataset") -> list[tuple[float, dict]]:
    """Regenerate at each DER penetration level and score each task on a fixed split."""
    out = []
    for level in levels:
        inputs, _ = build_inputs(replace(gen, der_levels=(float(level),)), scope)
        acc = {}
        for task in tasks:
            acc[task] = fit_dual(inputs, replace(cfg, task=task)).metrics.accuracy
            log.info("DER %g%% %s: acc %.4f", level, task, acc[task])
        out.append((float(level), acc))
    return out


def write_der_csv(rows, path, tasks=("type", "location")) -> None:
    names = {"type": "FaultTypeAccuracy", "location": "FaultLocationAccuracy"}
    lines = ["DerPct," + ",".join(names[t] for t in tasks)]
    for level, acc in rows:
        lines.append(",".join([format(level, "g"), *(format(acc[t], ".6f") for t in tasks)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- ablation ---------------------------------------------------------------

@dataclass
class SweepSpec:
    axis: str
    values: tuple = ()
    base_config: StageConfigs = field(default_factory=StageConfigs)
    seed: int = 0

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown sweep axis {self.axis!r}; expected one of {AXES}")
        if not self.values:
            if self.axis not in ABLATION_GRID:
                raise ValueError(f"axis {self.axis} has no default grid; give values")
            self.values = ABLATION_GRID[self.axis]
        self.values = tuple(self.values)


def base_value(axis: str, cfg: StageConfigs):
    c1, c2 = TASK_CONFIGS[cfg.task]
    return {"BatchSize": cfg.batch_size,
            "LatentDim": cfg.d_model or c1.d_model,
            "Layers": cfg.stage2_layers or c2.n_layers,
            "Heads": cfg.n_heads or c1.n_heads}[axis]


def apply_axis(cfg: StageConfigs, axis: str, value) -> StageConfigs:
    field_name = {"BatchSize": "batch_size", "LatentDim": "d_model", "Layers": "stage2_layers",
                  "Heads": "n_heads"}[axis]
    return replace(cfg, **{field_name: int(value)})


def invalid_reason(cfg: StageConfigs) -> str | None:
    d = cfg.d_model or TASK_CONFIGS[cfg.task][0].d_model
    h = cfg.n_heads or TASK_CONFIGS[cfg.task][0].n_heads
    if d % h:
        return f"d_model {d} not divisible by {h} heads"
    return None


@dataclass
class AblationRow:
    task: str
    axis: str
    value: int
    metrics: Metrics | None
    skipped: str | None = None
    best: bool = False


def ablation(spec: SweepSpec, inputs: ModelInputs) -> list[AblationRow]:
    """One-factor-at-a-time sweep of ``spec.axis`` around ``spec.base_config``."""
    if spec.axis not in ABLATION_GRID:
        raise ExperimentError(f"axis {spec.axis} is swept by its own runner, not ablation")
    base = replace(spec.base_config, seed=spec.seed)
    rows = []
    for value in spec.values:
        cfg = apply_axis(base, spec.axis, value)
        reason = invalid_reason(cfg)
        if reason:
            rows.append(AblationRow(base.task, spec.axis, int(value), None, reason))
            continue
        m = fit_dual(inputs, cfg).metrics
        log.info("ablation %s %s=%s: acc %.4f", base.task, spec.axis, value, m.accuracy)
        rows.append(AblationRow(base.task, spec.axis, int(value), m))
    valid = [r for r in rows if r.metrics is not None]
    if not valid:
        raise ExperimentError(f"every value of axis {spec.axis} is invalid for task {base.task}")
    best = max(valid, key=lambda r: r.metrics.accuracy)  # max keeps the first of ties
    best.best = True
    return rows


def write_ablation_csv(rows: list[AblationRow], path) -> None:
    lines = ["Task,Axis,Value,Accuracy,Precision,Recall,F1,Best,Note"]
    for r in rows:
        vals = r.metrics.row() if r.metrics else ("",) * 4
        cells = [format(v, ".6f") if isinstance(v, float) else v for v in vals]
        lines.append(",".join([r.task, r.axis, str(r.value), *cells, "*" if r.best else "",
                               f"skipped: {r.skipped}" if r.skipped else ""]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- attention --------------------------------------------------------------

class AttentionCaptureError(RuntimeError):
    pass


def onset_steps(length: int = 100, window_s: float = 1.0 / F_SYS) -> np.ndarray:
    """Model steps whose source sample lies in the first power cycle after fault onset."""
    t = sample_times()[resample_indices(len(sample_times()), length)]
    return np.flatnonzero((t >= FAULT_ON) & (t < FAULT_ON + window_s))


def off_fault_steps(length: int = 100) -> np.ndarray:
    t = sample_times()[resample_indices(len(sample_times()), length)]
    return np.flatnonzero((t < FAULT_ON) | (t > FAULT_OFF))


def attention_map(classifier: FaultXformer | FeatureExtractor, encoded: np.ndarray,
                  batch_size: int = 64) -> np.ndarray:
    """Final-layer attention averaged over heads and samples: [L, L], rows sum to 1.

    Works on either stage; a stage-1 extractor takes raw features as ``encoded``.
    """
    attn = classifier.layers[-1].self_attn
    if not attn.capture:
        raise AttentionCaptureError("attention capture is disabled on the final layer")
    if len(encoded) == 0:
        raise ExperimentError("no samples to average attention over")
    classifier.eval()
    total = None
    with no_grad():
        for s in range(0, len(encoded), batch_size):
            classifier(encoded[s:s + batch_size])
            w = attn.last_weights.mean(axis=1).sum(axis=0)
            total = w if total is None else total + w
    return total / len(encoded)


def onset_ratio(weights: np.ndarray, onset=None, off=None) -> float:
    """Mean column attention over onset steps divided by the off-fault column mean."""
    cols = weights.mean(axis=0)
    onset = onset_steps(len(cols)) if onset is None else onset
    off = off_fault_steps(len(cols)) if off is None else off
    return float(cols[onset].mean() / cols[off].mean())


def write_attention_csv(weights: np.ndarray, path) -> None:
    np.savetxt(path, weights, delimiter=",", fmt="%.10g")


def write_pgm(weights: np.ndarray, path) -> None:
    """8-bit binary PGM with linear min-max scaling."""
    lo, hi = float(weights.min()), float(weights.max())
    scaled = np.zeros_like(weights) if hi == lo else (weights - lo) / (hi - lo)
    img = np.round(scaled * 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def attention_export(classifier: FaultXformer, encoded: np.ndarray, out_dir) -> tuple[np.ndarray, float]:
    weights = attention_map(classifier, encoded)
    out_dir = Path(out_dir)
    write_attention_csv(weights, out_dir / "attention.csv")
    write_pgm(weights, out_dir / "attention.pgm")
    return weights, onset_ratio(weights)


# --- latency ----------------------------------------------------------------

@dataclass
class LatencyReport:
    batch_size: int
    trials: int
    warmup: int
    mean_ms: float
    median_ms: float
    p99_ms: float

    @property
    def per_sample_ms(self) -> float:
        return self.mean_ms / self.batch_size

    @property
    def median_per_sample_ms(self) -> float:
        return self.median_ms / self.batch_size

    @property
    def within_budget(self) -> bool:
        return self.per_sample_ms < LATENCY_BUDGET_MS

    def lines(self) -> list[str]:
        return [
            f"batch {self.batch_size}, {self.trials} trials after {self.warmup} warmup",
            f"per batch: mean {self.mean_ms:.3f} ms, median {self.median_ms:.3f} ms, "
            f"p99 {self.p99_ms:.3f} ms",
            f"per sample: {self.per_sample_ms:.3f} ms (budget {LATENCY_BUDGET_MS:g} ms, "
            f"reference CPU figure {REFERENCE_CPU_MS_PER_SAMPLE} ms)",
        ]

    def write_csv(self, path) -> None:
        keys = ("batch_size", "trials", "warmup", "mean_ms", "median_ms", "p99_ms")
        vals = [asdict(self)[k] for k in keys] + [self.per_sample_ms, self.within_budget]
        Path(path).write_text(",".join([*keys, "per_sample_ms", "within_budget"]) + "\n"
                              + ",".join(str(v) for v in vals) + "\n", encoding="utf-8")


def latency_bench(model: DualStageModel, batch_size: int = 32, trials: int = 100,
                  warmup: int = 10, seed: int = 0, dtype=np.float32) -> LatencyReport:
    """Wall-clock stage-1 + stage-2 inference on random batches at ``dtype`` precision."""
    if trials < 1 or warmup < 0:
        raise ValueError("trials must be >= 1 and warmup >= 0")
    fast = DualStageModel(copy.deepcopy(model.extractor).astype(dtype),
                          copy.deepcopy(model.classifier).astype(dtype))
    length = model.extractor.config.max_len
    x = np.random.default_rng(seed).standard_normal((batch_size, length, 2)).astype(dtype)
    times = []
    for i in range(warmup + trials):
        t0 = time.perf_counter()
        fast.logits(x)
        dt = (time.perf_counter() - t0) * 1e3
        if i >= warmup:
            times.append(dt)
    t = np.array(times)
    return LatencyReport(batch_size, trials, warmup, float(t.mean()), float(np.median(t)),
                         float(np.percentile(t, 99)))
