from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from faultxformer.model import EncoderConfig, FaultXformer, FeatureExtractor, build_stages
from faultxformer.training import (CVReport, Metrics, TrainConfig, TrainingError, cross_validate,
                                   encode, evaluate, fit_extractor, train, write_classwise_csv,
                                   write_confusion_csv, write_metrics_csv)

TINY = EncoderConfig(8, 2, 8, 1, dropout_p=0.0)


def toy_data(n=64, length=10, seed=0):
    """Two classes separated by the sign of the first channel's mean."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(0, 0.3, (n, length, 2))
    x[:, :, 0] += np.where(y == 1, 1.0, -1.0)[:, None]
    return x, y


# --- metrics ------------------------------------------------------------------

def test_metrics_all_zero_prediction():
    m = Metrics.from_predictions([0, 0, 1, 1], [0, 0, 0, 0], 2)
    assert m.accuracy == 0.5 and m.macro_recall == 0.5 and m.macro_precision == 0.25
    np.testing.assert_allclose(m.f1, [2 / 3, 0.0])
    np.testing.assert_array_equal(m.confusion, [[2, 0], [2, 0]])


def test_metrics_perfect():
    m = Metrics.from_predictions([0, 1, 2], [0, 1, 2], 3)
    assert m.row() == (1.0, 1.0, 1.0, 1.0)


def test_per_class_accuracy_is_recall():
    m = Metrics.from_predictions([0, 0, 0, 1], [0, 0, 1, 1], 2)
    np.testing.assert_allclose(m.per_class_accuracy, [2 / 3, 1.0])


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=200))
def test_metrics_agree_with_brute_force(pairs):
    y, p = np.array(pairs).T
    m = Metrics.from_predictions(y, p, 5)
    assert m.accuracy == pytest.approx(np.mean(y == p))
    assert m.confusion.sum() == len(y)
    for c in range(5):
        tp = np.sum((y == c) & (p == c))
        prec = tp / np.sum(p == c) if np.any(p == c) else 0.0
        rec = tp / np.sum(y == c) if np.any(y == c) else 0.0
        assert m.precision[c] == pytest.approx(prec) and m.recall[c] == pytest.approx(rec)
    assert 0.0 <= m.macro_f1 <= 1.0


# --- config -------------------------------------------------------------------

def test_config_defaults_and_validation():
    assert TrainConfig("type").epochs == 200 and TrainConfig("location").epochs == 250
    assert TrainConfig().lr == 1e-3 and TrainConfig().batch_size == 32
    for bad in ({"lr": -1}, {"batch_size": 0}, {"epochs": 0}, {"task": "x"}, {"patience": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# --- training loop ------------------------------------------------------------

def test_toy_problem_reaches_full_accuracy():
    x, y = toy_data()
    model = FeatureExtractor(TINY, 2, seed=0)
    res = train(model, x, y, x, y, TrainConfig(lr=1e-2, batch_size=16, epochs=20))
    assert evaluate(model, x, y).accuracy == 1.0
    assert res.best_val_f1 == 1.0 and len(res.loss_curve) <= 20


def test_zero_learning_rate_leaves_parameters_unchanged():
    x, y = toy_data()
    model = FeatureExtractor(TINY, 2, seed=0)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    train(model, x, y, x, y, TrainConfig(lr=0.0, epochs=2))
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_same_seed_same_curve():
    x, y = toy_data()
    cfg = TrainConfig(lr=1e-2, batch_size=8, epochs=3, seed=5)
    curves = []
    for _ in range(2):
        model = FeatureExtractor(replace(TINY, dropout_p=0.2), 2, seed=1)
        curves.append(train(model, x, y, x, y, cfg).loss_curve)
    assert curves[0] == curves[1]


def test_best_snapshot_is_restored():
    x, y = toy_data()
    model = FeatureExtractor(TINY, 2, seed=0)
    res = train(model, x, y, x, y, TrainConfig(lr=1e-2, batch_size=16, epochs=4))
    assert evaluate(model, x, y).macro_f1 == pytest.approx(res.best_val_f1)


def test_patience_stops_early():
    x, y = toy_data()
    model = FeatureExtractor(TINY, 2, seed=0)
    res = train(model, x, y, x, y, TrainConfig(lr=0.0, epochs=50, patience=3))
    assert len(res.loss_curve) == 4


def test_non_finite_loss_raises():
    x, y = toy_data()
    x[3, 2, 0] = np.nan
    model = FeatureExtractor(TINY, 2, seed=0)
    with pytest.raises(TrainingError, match="non-finite"):
        train(model, x, y, x, y, TrainConfig(batch_size=64, epochs=1))


def test_empty_split_raises():
    x, y = toy_data()
    with pytest.raises(TrainingError):
        train(FeatureExtractor(TINY, 2), x[:0], y[:0], x, y, TrainConfig(epochs=1))


def test_untrained_model_is_near_chance():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(800, 100, 2))
    y = np.repeat(np.arange(8), 100)
    ext, clf = build_stages("type", seed=3)
    m = evaluate(clf, encode(ext, x), y)
    assert abs(m.accuracy - 1 / 8) <= 0.05


# --- two-stage and CV ---------------------------------------------------------

def test_fit_extractor_and_encode_shapes():
    x, y = toy_data(40)
    ext, res = fit_extractor(x, y, TrainConfig(lr=1e-2, epochs=2), FeatureExtractor(TINY, 2))
    enc = encode(ext, x)
    assert enc.shape == (40, 10, 8) and len(res.loss_curve) >= 1


def _tiny_cv(k=4):
    x, y = toy_data(48)
    enc = encode(FeatureExtractor(TINY, 2, seed=0), x)
    cfg = TrainConfig(lr=1e-2, batch_size=8, epochs=3, seed=2)
    return cross_validate(enc, y, cfg, k=k, n_classes=2,
                          model_factory=lambda f: FaultXformer(TINY, 2, seed=f)), y


def test_cross_validation_report():
    rep, y = _tiny_cv()
    assert len(rep.folds) == 4 and rep.table().shape == (4, 4)
    np.testing.assert_allclose(rep.mean, rep.table().mean(axis=0))
    assert rep.confusion.sum() == len(y)
    tests = np.concatenate(rep.plan.test_indices)
    assert sorted(tests.tolist()) == list(range(len(y)))
    for f in range(4):
        tr, va, te = rep.plan.iteration(f)
        assert not np.intersect1d(tr, te).size and not np.intersect1d(va, te).size


def test_cv_csv_average_row(tmp_path):
    rep, _ = _tiny_cv()
    rep.write_csv(tmp_path / "cv.csv")
    lines = (tmp_path / "cv.csv").read_text().splitlines()
    assert lines[0] == "Fold,Accuracy,Precision,Recall,F1"
    assert [ln.split(",")[0] for ln in lines[1:]] == [f"Fold {i}" for i in range(1, 5)] + [
        "Average", "Std", "CoV"]
    avg = np.array(lines[5].split(",")[1:], dtype=float)
    folds = np.array([ln.split(",")[1:] for ln in lines[1:5]], dtype=float)
    np.testing.assert_allclose(avg, folds.mean(axis=0), atol=1e-6)


def test_confusion_and_classwise_csv(tmp_path):
    m = Metrics.from_predictions([0, 1, 1], [0, 1, 0], 2)
    write_confusion_csv(m.confusion, ["A", "B"], tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text() == "true\\pred,A,B\nA,1,0\nB,1,1\n"
    write_classwise_csv(m, ["A", "B"], tmp_path / "w.csv")
    rows = (tmp_path / "w.csv").read_text().splitlines()
    assert rows[0] == "Class,Accuracy,Precision,Recall,F1"
    assert rows[2] == "B,0.500000,1.000000,0.500000,0.666667"


def test_metrics_csv_blank_for_nan(tmp_path):
    write_metrics_csv(["a"], [(1.0, float("nan"), 0.5, 0.25)], tmp_path / "m.csv", first_col="X")
    assert (tmp_path / "m.csv").read_text().splitlines()[1] == "a,1.000000,,0.500000,0.250000"
