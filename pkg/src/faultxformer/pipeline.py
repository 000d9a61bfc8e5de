"""Dataset persistence, normalization, length adaptation and stratified fold planning."""
from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .phasor_sim import FAULT_TYPES, LOCATION_LABELS, N_RAW, PMU_IDS, PhasorSequence

SEQ_LEN = 100
EPS = 1e-8
META_COLUMNS = ("event_id", "pmu_id", "fault_type", "location", "der_pct", "resistance_ohm",
                "inception_deg", "noise_pct", "seed")
NO_LOCATION = "NONE"


def csv_header(n_raw: int = N_RAW) -> list[str]:
    return ([*META_COLUMNS] + [f"mag_{i}" for i in range(n_raw)]
            + [f"ph_{i}" for i in range(n_raw)])


# --- errors ---------------------------------------------------------------

class DatasetFormatError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


class HeaderError(DatasetFormatError):
    pass


class RowArityError(DatasetFormatError):
    pass


class LabelError(DatasetFormatError):
    pass


class StratificationError(ValueError):
    pass


# --- dataset container -----------------------------------------------------

@dataclass(eq=False)
class Dataset:
    """Raw (pre-normalization) rows in columnar form.

    ``fault_type`` and ``location`` hold class indices; ``location`` is -1 for
    rows without a bus label.
    """

    event_id: np.ndarray
    pmu_id: np.ndarray
    fault_type: np.ndarray
    location: np.ndarray
    der_pct: np.ndarray
    resistance_ohm: np.ndarray
    inception_deg: np.ndarray
    noise_pct: np.ndarray
    seed: np.ndarray
    magnitude: np.ndarray
    phase_deg: np.ndarray

    def __len__(self) -> int:
        return len(self.event_id)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name))
                   for f in fields(self))

    def subset(self, idx) -> "Dataset":
        return Dataset(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    @classmethod
    def from_sequences(cls, rows: Sequence[tuple[int, PhasorSequence]]) -> "Dataset":
        def col(fn, dtype):
            return np.array([fn(e, s) for e, s in rows], dtype=dtype)

        return cls(
            event_id=col(lambda e, s: e, np.int64),
            pmu_id=col(lambda e, s: s.pmu_id, np.int64),
            fault_type=col(lambda e, s: s.scenario.type_label, np.int64),
            location=col(lambda e, s: s.scenario.location_label, np.int64),
            der_pct=col(lambda e, s: s.scenario.der_level_pct, np.float64),
            resistance_ohm=col(lambda e, s: s.scenario.resistance_ohm, np.float64),
            inception_deg=col(lambda e, s: s.scenario.inception_deg, np.float64),
            noise_pct=col(lambda e, s: s.scenario.noise_pct, np.float64),
            seed=col(lambda e, s: s.scenario.seed, np.int64),
            magnitude=np.stack([s.magnitude for _, s in rows]),
            phase_deg=np.stack([s.phase_deg for _, s in rows]),
        )


def _num(v) -> str:
    return format(float(v), ".17g")


def write_dataset(ds: Dataset, path) -> None:
    n_raw = ds.magnitude.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(csv_header(n_raw)) + "\n")
        for i in range(len(ds)):
            loc = LOCATION_LABELS[ds.location[i]] if ds.location[i] >= 0 else NO_LOCATION
            meta = [str(ds.event_id[i]), str(ds.pmu_id[i]), FAULT_TYPES[ds.fault_type[i]], loc,
                    _num(ds.der_pct[i]), _num(ds.resistance_ohm[i]), _num(ds.inception_deg[i]),
                    _num(ds.noise_pct[i]), str(ds.seed[i])]
            vals = [format(v, ".17g") for v in ds.magnitude[i].tolist()]
            vals += [format(v, ".17g") for v in ds.phase_deg[i].tolist()]
            fh.write(",".join(meta + vals) + "\n")


def read_dataset(path) -> Dataset:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise HeaderError(path, 1, "empty file, header row missing") from None
        for col in META_COLUMNS:
            if col not in header:
                raise HeaderError(path, 1, f"missing column {col!r}")
        n_mag = max(sum(h.startswith("mag_") for h in header),
                    sum(h.startswith("ph_") for h in header))
        expected = csv_header(n_mag)
        if header != expected:
            missing = [c for c in expected if c not in header]
            what = f"missing column {missing[0]!r}" if missing else "columns out of order"
            raise HeaderError(path, 1, what)
        width = len(header)
        meta_rows, values = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise RowArityError(path, lineno, f"expected {width} fields, got {len(row)}")
            try:
                ft = FAULT_TYPES.index(row[2])
            except ValueError:
                raise LabelError(path, lineno, f"unknown fault_type {row[2]!r}") from None
            if row[3] == NO_LOCATION:
                loc = -1
            elif row[3] in LOCATION_LABELS:
                loc = LOCATION_LABELS.index(row[3])
            else:
                raise LabelError(path, lineno, f"unknown location {row[3]!r}")
            try:
                pmu = int(row[1])
                meta = (int(row[0]), pmu, ft, loc, float(row[4]), float(row[5]), float(row[6]),
                        float(row[7]), int(row[8]))
                vals = np.array(row[9:], dtype=np.float64)
            except ValueError as exc:
                raise DatasetFormatError(path, lineno, f"unparsable number: {exc}") from None
            if pmu not in PMU_IDS:
                raise LabelError(path, lineno, f"pmu_id {pmu} outside {PMU_IDS}")
            meta_rows.append(meta)
            values.append(vals)
    if not meta_rows:
        raise DatasetFormatError(path, 2, "no data rows")
    cols = list(zip(*meta_rows))
    dtypes = (np.int64, np.int64, np.int64, np.int64, np.float64, np.float64, np.float64,
              np.float64, np.int64)
    arrs = [np.array(c, dtype=dt) for c, dt in zip(cols, dtypes)]
    block = np.stack(values)
    return Dataset(*arrs, magnitude=block[:, :n_mag].copy(), phase_deg=block[:, n_mag:].copy())


# --- key=value structured text (manifests, run configs) --------------------

def format_kv(items: dict) -> str:
    lines = []
    for k, v in items.items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_manifest(manifest, path) -> None:
    from dataclasses import asdict
    items = {"rows": manifest.n_rows}
    items.update({f"config.{k}": v for k, v in asdict(manifest.config).items()})
    items.update({f"count.type.{k}": v for k, v in manifest.type_counts.items()})
    items.update({f"count.location.{k}": v for k, v in manifest.location_counts.items()})
    Path(path).write_text(format_kv(items), encoding="utf-8")


def read_manifest(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"), str(path))


# --- normalization and length adaptation -----------------------------------

def zscore(channel, eps: float = EPS, mean: float | None = None, std: float | None = None):
    """(x - μ) / (σ + ε) with population σ; statistics default to those of ``channel``."""
    x = np.asarray(channel, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True) if mean is None else mean
    sd = x.std(axis=-1, keepdims=True) if std is None else std
    z = (x - mu) / (sd + eps)
    if mean is None and std is None:
        # a rounded mean leaves ulp residue on constant channels; they map to exact zeros
        z = np.where(np.ptp(x, axis=-1, keepdims=True) == 0, 0.0, z)
    return z


def resample_indices(n_raw: int, length: int = SEQ_LEN) -> np.ndarray:
    if n_raw < 2:
        raise ValueError(f"raw sequence needs at least 2 samples, got {n_raw}")
    if length == 1:
        return np.zeros(1, dtype=np.int64)
    return np.floor(np.arange(length) * (n_raw - 1) / (length - 1) + 0.5).astype(np.int64)


def resample_to_length(raw, length: int = SEQ_LEN) -> np.ndarray:
    """Uniform index downsampling along the last axis; keeps first and last samples."""
    raw = np.asarray(raw)
    return raw[..., resample_indices(raw.shape[-1], length)]


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel (magnitude, phase) mean and std for dataset-scope normalization."""

    mean: tuple[float, float]
    std: tuple[float, float]

    @classmethod
    def fit(cls, ds: Dataset) -> "ChannelStats":
        return cls((float(ds.magnitude.mean()), float(ds.phase_deg.mean())),
                   (float(ds.magnitude.std()), float(ds.phase_deg.std())))


@dataclass
class ModelInputs:
    features: np.ndarray   # [N, L, 2]
    type_labels: np.ndarray
    loc_labels: np.ndarray
    pmu_id: np.ndarray
    event_id: np.ndarray

    def __len__(self) -> int:
        return len(self.features)

    def labels(self, task: str) -> np.ndarray:
        return self.type_labels if task == "type" else self.loc_labels

    def subset(self, idx) -> "ModelInputs":
        return ModelInputs(self.features[idx], self.type_labels[idx], self.loc_labels[idx],
                           self.pmu_id[idx], self.event_id[idx])


def prepare(ds: Dataset, scope: str = "dataset", stats: ChannelStats | None = None,
            length: int = SEQ_LEN) -> ModelInputs:
    """Z-score each raw channel, then downsample to ``length`` steps.

    ``scope="dataset"`` uses one (μ, σ) per channel over the whole dataset (or
    ``stats`` when given); ``scope="sample"`` normalizes every sequence by its own
    statistics.
    """
    if scope == "dataset":
        stats = stats or ChannelStats.fit(ds)
        mag = zscore(ds.magnitude, mean=stats.mean[0], std=stats.std[0])
        ph = zscore(ds.phase_deg, mean=stats.mean[1], std=stats.std[1])
    elif scope == "sample":
        mag, ph = zscore(ds.magnitude), zscore(ds.phase_deg)
    else:
        raise ValueError(f"unknown normalization scope {scope!r}")
    feats = np.stack([resample_to_length(mag, length), resample_to_length(ph, length)], axis=-1)
    return ModelInputs(feats, ds.fault_type.copy(), ds.location.copy(), ds.pmu_id.copy(),
                       ds.event_id.copy())


def task_subset(inputs: ModelInputs, task: str) -> ModelInputs:
    """Rows usable for ``task``: location drops NoFault and unlabeled rows."""
    if task == "type":
        return inputs
    if task == "location":
        keep = (inputs.type_labels != FAULT_TYPES.index("NoFault")) & (inputs.loc_labels >= 0)
        return inputs.subset(np.flatnonzero(keep))
    raise ValueError(f"unknown task {task!r}")


# --- stratified folds ------------------------------------------------------

@dataclass
class FoldPlan:
    k: int
    test_indices: list[np.ndarray]
    train_indices: list[np.ndarray]
    val_indices: list[np.ndarray]

    def iteration(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.train_indices[i], self.val_indices[i], self.test_indices[i]

    def check(self, n: int) -> None:
        """Raise if test folds do not partition range(n) or any split overlaps."""
        allt = np.concatenate(self.test_indices)
        if len(allt) != n or not np.array_equal(np.sort(allt), np.arange(n)):
            raise AssertionError("test folds do not partition the dataset")
        for i in range(self.k):
            tr, va, te = map(set, self.iteration(i))
            if tr & va or tr & te or va & te:
                raise AssertionError(f"iteration {i}: train/val/test overlap")
            if len(tr) + len(va) + len(te) != n:
                raise AssertionError(f"iteration {i}: splits do not cover the dataset")


def stratified_folds(labels, k: int = 10, seed: int = 0, val_fraction: float = 2 / 9) -> FoldPlan:
    """Stratified k-fold test partition with a stratified train/val split of the remainder.

    Per class, shuffled members are dealt round-robin into folds starting where
    the previous class stopped, so every per-class fold count is floor or ceil of
    n_c/k and fold sizes differ by at most one.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    for c, n in zip(classes, counts):
        if n < k:
            raise StratificationError(f"class {c} has {n} samples, fewer than k={k} folds")
    fold_of = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        fold_of[idx] = (np.arange(len(idx)) + offset) % k
        offset = (offset + len(idx)) % k
    tests = [np.flatnonzero(fold_of == f) for f in range(k)]
    trains, vals = [], []
    for f in range(k):
        pool = np.flatnonzero(fold_of != f)
        val_parts = []
        for c in classes:
            members = rng.permutation(pool[labels[pool] == c])
            val_parts.append(members[: int(round(len(members) * val_fraction))])
        val = np.sort(np.concatenate(val_parts))
        vals.append(val)
        trains.append(np.setdiff1d(pool, val, assume_unique=True))
    return FoldPlan(k, tests, trains, vals)
