import json

import numpy as np
import pytest

from difftopk.diffrank import OperatorConfig
from difftopk.harness import (Adam, ClassifierModel, Dataset, TrainConfig, TrainingError,
                              assign_splits, evaluate, generate_synthetic,
                              grid_search_temperature, label_ranks, nearest_mean_scores,
                              read_csv, temperature_grid, topk_accuracy, train, write_csv)
from difftopk.loss import RankDistribution


def small_data(seed=0, **kw):
    args = dict(n_classes=6, dims=4, per_class=40, confusable_pairs=1, seed=seed)
    args.update(kw)
    return generate_synthetic(**args)


def test_synthetic_is_deterministic():
    a, b = generate_synthetic(seed=3), generate_synthetic(seed=3)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes() and a.split.tobytes() == b.split.tobytes()
    assert generate_synthetic(seed=4).features.tobytes() != a.features.tobytes()


def test_synthetic_shape_and_pairs():
    ds = generate_synthetic(n_classes=20, dims=10, per_class=30, sigma=1.0, confusable_pairs=10)
    assert ds.features.shape == (600, 10) and ds.n_classes == 20
    gaps = np.linalg.norm(ds.means[0::2] - ds.means[1::2], axis=1)
    assert np.all(gaps < 0.5)
    assert set(np.bincount(ds.split)) <= {120, 360}


def test_synthetic_errors():
    with pytest.raises(ValueError):
        generate_synthetic(n_classes=4, confusable_pairs=3)
    with pytest.raises(ValueError):
        generate_synthetic(sigma=-1.0)


def test_splits_disjoint_and_sized():
    split = assign_splits(1000, 0)
    assert np.bincount(split).tolist() == [600, 200, 200]


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), [0, 1, 3], 3, [0, 1, 2])
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan, 0.0]]), [0], 1, [0])


def test_bayes_oracle_on_confusable_pairs():
    ds = generate_synthetic(n_classes=20, confusable_pairs=10, sigma=1.0, per_class=300)
    X, y = ds.features, ds.labels
    acc = topk_accuracy(nearest_mean_scores(X, ds.means), X, y, [1, 2])
    assert acc[1] < 0.75
    assert acc[2] > 0.98


def test_topk_accuracy_basics():
    logits = np.array([[3.0, 2.0, 1.0], [1.0, 2.0, 3.0]])
    acc = topk_accuracy(logits, None, [0, 0], [1, 2, 3])
    assert acc == {1: 0.5, 2: 0.5, 3: 1.0}
    # ties go to the lower class index
    np.testing.assert_array_equal(label_ranks(np.zeros((3, 3)), np.array([0, 1, 2])), [0, 1, 2])


def test_random_three_class_top2():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((10000, 3))
    y = rng.integers(0, 3, 10000)
    assert abs(topk_accuracy(logits, None, y, [2])[2] - 2 / 3) < 0.02


def test_topk_accuracy_monotone_in_k():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((500, 8))
    y = rng.integers(0, 8, 500)
    acc = topk_accuracy(logits, None, y, range(1, 9))
    assert all(acc[k] <= acc[k + 1] for k in range(1, 8))
    assert acc[8] == 1.0


def test_model_gradient():
    rng = np.random.default_rng(2)
    model = ClassifierModel.init(5, 4, 7, rng)
    X = rng.standard_normal((6, 5))
    U = rng.standard_normal((6, 4))
    out, acts = model.forward(X)
    grads = model.backward(acts, U)
    W = model.weights[0]
    i, j = 2, 3
    h = 1e-6
    W[i, j] += h
    up = np.sum(U * model.logits(X))
    W[i, j] -= 2 * h
    down = np.sum(U * model.logits(X))
    W[i, j] += h
    assert abs((up - down) / (2 * h) - grads[0][i, j]) < 1e-6


def test_adam_minimises_quadratic():
    x = np.array([3.0, -2.0])
    opt = Adam([x], lr=0.1)
    for _ in range(500):
        opt.step([x], [2 * x])
    assert np.all(np.abs(x) < 1e-2)


def test_separable_data_reaches_full_accuracy():
    ds = generate_synthetic(n_classes=5, dims=6, per_class=40, sigma=0.0, confusable_pairs=0)
    model, records = train(ds, TrainConfig(loss_mode="softmax", lr=0.05, max_epochs=50,
                                           patience=50))
    assert max(r.accuracy["train"][1] for r in records) == 1.0
    assert evaluate(model, ds)["test"][1] == 1.0


def test_training_is_bit_reproducible(tmp_path):
    ds = small_data()
    cfg = TrainConfig(pk=RankDistribution((0.5, 0.5)), operator=OperatorConfig("diffsortnet"),
                      max_epochs=5, seed=3)
    m1, r1 = train(ds, cfg, metrics_path=tmp_path / "a.jsonl")
    m2, r2 = train(ds, cfg, metrics_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert all(np.array_equal(a, b) for a, b in zip(m1.params, m2.params))
    lines = (tmp_path / "a.jsonl").read_text().splitlines()
    assert len(lines) == len(r1) == len(r2)
    rec = json.loads(lines[0])
    assert rec["epoch"] == 1 and set(rec["accuracy"]) == {"train", "val", "test"}


def test_pk1_training_matches_softmax_baseline():
    ds = small_data()
    base = TrainConfig(loss_mode="softmax", max_epochs=4, seed=1)
    mixed = TrainConfig(pk=RankDistribution((1.0,)), loss_mode="sm+topk", max_epochs=4, seed=1)
    (ma, ra), (mb, rb) = train(ds, base), train(ds, mixed)
    assert all(np.array_equal(a, b) for a, b in zip(ma.params, mb.params))
    assert [r.train_loss for r in ra] == [r.train_loss for r in rb]


def test_early_stopping_respects_patience():
    ds = small_data()
    _, records = train(ds, TrainConfig(loss_mode="softmax", lr=1e-6, max_epochs=100, patience=3))
    assert len(records) < 100


def test_non_finite_loss_aborts():
    ds = small_data()
    ds.features[ds.split == 0] = 1e308
    with pytest.raises(TrainingError, match="non-finite"):
        train(ds, TrainConfig(loss_mode="softmax", lr=1.0, max_epochs=3))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(loss_mode="hinge")


def test_temperature_grid():
    assert temperature_grid(0.25, 4.0) == [0.25, 0.5, 1.0, 2.0, 4.0]
    assert temperature_grid(1.0, 1.0) == [1.0]
    assert temperature_grid(1.0, 3.0) == [1.0, 2.0]
    with pytest.raises(ValueError):
        temperature_grid(2.0, 1.0)
    with pytest.raises(ValueError):
        temperature_grid(0.0, 1.0)


def test_grid_search_bookkeeping_and_determinism():
    ds = small_data()
    cfg = TrainConfig(pk=RankDistribution((0.5, 0.5)), operator=OperatorConfig("softsort"),
                      max_epochs=3)
    best, results = grid_search_temperature(ds, cfg, (0.25, 4.0))
    assert [r["tau"] for r in results] == [0.25, 0.5, 1.0, 2.0, 4.0]
    top = max(r["score"] for r in results)
    assert best == min(r["tau"] for r in results if r["score"] == top)
    again, _ = grid_search_temperature(ds, cfg, (0.25, 4.0))
    assert again == best
    single, results = grid_search_temperature(ds, cfg, (0.5, 0.5))
    assert single == 0.5 and len(results) == 1


def test_csv_roundtrip(tmp_path):
    ds = small_data()
    path = tmp_path / "d.csv"
    write_csv(ds, path)
    assert path.read_text().splitlines()[0] == "f0,f1,f2,f3,label"
    back = read_csv(path, n_classes=6, seed=1)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.split, ds.split)


def test_csv_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_csv(bad)
    bad.write_text("f0,label\n1.0,7\n")
    with pytest.raises(ValueError):
        read_csv(bad, n_classes=3)
