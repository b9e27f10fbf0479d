"""Desk-scale training: synthetic data, a small MLP head, Adam, early stopping
and a factor-2 temperature grid search."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .diffrank import OperatorConfig
from .loss import LOSS_MODES, PerClassRankDistributions, RankDistribution, batch_loss

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class TrainingError(RuntimeError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: np.ndarray  # 0 train, 1 val, 2 test
    means: np.ndarray | None = None  # generating class means, when synthetic

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        self.split = np.asarray(self.split, dtype=np.int8)
        N = len(self.labels)
        if self.features.ndim != 2 or self.features.shape[0] != N or self.split.shape != (N,):
            raise ValueError("features, labels and split disagree in length")
        if np.any((self.labels < 0) | (self.labels >= self.n_classes)):
            raise ValueError("label out of range")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite features")

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.split == SPLITS.index(name)
        return self.features[mask], self.labels[mask]


def assign_splits(N: int, seed: int, fractions=(0.6, 0.2, 0.2)) -> np.ndarray:
    rng = np.random.default_rng(seed)
    order = rng.permutation(N)
    n_train = int(round(fractions[0] * N))
    n_val = int(round(fractions[1] * N))
    split = np.full(N, 2, dtype=np.int8)
    split[order[:n_train]] = 0
    split[order[n_train:n_train + n_val]] = 1
    return split


def generate_synthetic(n_classes: int = 20, dims: int = 10, per_class: int = 150,
                       sigma: float = 1.0, confusable_pairs: int = 10, seed: int = 0,
                       spread: float = 2.0) -> Dataset:
    """Gaussian class clusters of width ``sigma``.

    Class means are drawn with scale ``spread``; for each of the first
    ``confusable_pairs`` pairs (2i, 2i+1) the second mean is moved to within
    ``sigma / 4`` of the first, so top-1 is ambiguous inside a pair while
    top-2 is not.
    """
    if n_classes < 1 or dims < 1 or per_class < 1 or sigma < 0:
        raise ValueError("sizes must be positive and sigma non-negative")
    if 2 * confusable_pairs > n_classes:
        raise ValueError("too many confusable pairs for the class count")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, dims)) * spread
    for i in range(confusable_pairs):
        a, b = 2 * i, 2 * i + 1
        d = rng.standard_normal(dims)
        means[b] = means[a] + d / np.linalg.norm(d) * (sigma / 4)
    labels = np.repeat(np.arange(n_classes), per_class)
    X = means[labels] + sigma * rng.standard_normal((len(labels), dims))
    split = assign_splits(len(labels), seed + 1)
    return Dataset(X, labels, n_classes, split, means)


def nearest_mean_scores(X: np.ndarray, means: np.ndarray) -> np.ndarray:
    """Bayes scores for equal-covariance isotropic clusters with equal priors."""
    return -((X[:, None, :] - means[None]) ** 2).sum(axis=2)


def write_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(ds.dims)] + ["label"])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def read_csv(path, n_classes: int | None = None, seed: int = 0) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    d = len(header) - 1
    if header != [f"f{i}" for i in range(d)] + ["label"]:
        raise ValueError(f"{path}: header must be f0,...,f{{d-1}},label")
    X = np.array([[float(v) for v in r[:d]] for r in rows[1:]], dtype=np.float64).reshape(-1, d)
    y = np.array([int(r[d]) for r in rows[1:]], dtype=np.intp)
    n = int(y.max()) + 1 if n_classes is None else n_classes
    return Dataset(X, y, n, assign_splits(len(y), seed))


# -- model -------------------------------------------------------------------------------

@dataclass
class ClassifierModel:
    weights: list
    biases: list

    @classmethod
    def init(cls, d: int, n_classes: int, hidden: int, rng: np.random.Generator):
        sizes = [d] + ([hidden] if hidden else []) + [n_classes]
        W = [rng.standard_normal((a, b)) * np.sqrt(2.0 / a) for a, b in zip(sizes, sizes[1:])]
        W[-1] *= 0.1
        return cls(W, [np.zeros(b) for b in sizes[1:]])

    @property
    def params(self) -> list:
        return self.weights + self.biases

    def forward(self, X):
        acts = [X]
        h = X
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def logits(self, X) -> np.ndarray:
        return self.forward(X)[0]

    def backward(self, acts, dout) -> list:
        gW, gb = [None] * len(self.weights), [None] * len(self.biases)
        d = dout
        for i in range(len(self.weights) - 1, -1, -1):
            gW[i] = acts[i].T @ d
            gb[i] = d.sum(axis=0)
            if i > 0:
                d = (d @ self.weights[i].T) * (acts[i] > 0)
        return gW + gb

    def copy(self) -> "ClassifierModel":
        return ClassifierModel([w.copy() for w in self.weights], [b.copy() for b in self.biases])


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- metrics ---------------------------------------------------------------------------

def label_ranks(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Zero-based rank of the true class; ties go to the lower class index."""
    ly = logits[np.arange(len(y)), y][:, None]
    idx = np.arange(logits.shape[1])[None, :]
    return np.sum((logits > ly) | ((logits == ly) & (idx < y[:, None])), axis=1)


def topk_accuracy(model, X, y, ks: Sequence[int]) -> dict[int, float]:
    logits = model.logits(X) if hasattr(model, "logits") else np.asarray(model)
    r = label_ranks(logits, np.asarray(y))
    return {int(k): float(np.mean(r < k)) if len(y) else 0.0 for k in ks}


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    accuracy: dict  # split -> {k: acc}

    def to_json(self) -> str:
        acc = {s: {str(k): v for k, v in a.items()} for s, a in self.accuracy.items()}
        return json.dumps({"epoch": self.epoch, "train_loss": self.train_loss, "accuracy": acc})


# -- training ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    pk: RankDistribution | PerClassRankDistributions = field(
        default_factory=lambda: RankDistribution((1.0,)))
    operator: OperatorConfig = field(default_factory=OperatorConfig)
    loss_mode: str = "sm+topk"
    m: int | None = None
    lr: float = 1e-3
    batch_size: int = 100
    max_epochs: int = 100
    patience: int = 10
    hidden: int = 0
    seed: int = 0
    report_k: int = 5

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("hyperparameters must be positive")

    @property
    def k_max(self) -> int:
        return self.pk.k_max

    @property
    def eval_ks(self) -> list[int]:
        return list(range(1, max(self.k_max, self.report_k) + 1))


def _criterion(acc: dict, k_max: int) -> float:
    return 0.5 * (acc[1] + acc[k_max])


def train(ds: Dataset, cfg: TrainConfig, metrics_path=None):
    """Mini-batch Adam with early stopping on the validation mean of top-1
    and top-K_max accuracy; returns the best model and per-epoch metrics."""
    rng = np.random.default_rng(cfg.seed)
    model = ClassifierModel.init(ds.dims, ds.n_classes, cfg.hidden, rng)
    opt = Adam(model.params, lr=cfg.lr)
    Xtr, ytr = ds.part("train")
    parts = {s: ds.part(s) for s in SPLITS}
    ks = [k for k in cfg.eval_ks if k <= ds.n_classes]
    k_max = min(cfg.k_max, ds.n_classes)
    best, best_score, since = model.copy(), -np.inf, 0
    records = []
    sink = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(len(ytr))
            total = 0.0
            for start in range(0, len(order), cfg.batch_size):
                b = order[start:start + cfg.batch_size]
                with np.errstate(over="ignore", invalid="ignore"):
                    logits, acts = model.forward(Xtr[b])
                losses = dlogits = None
                if np.all(np.isfinite(logits)):
                    losses, dlogits = batch_loss(logits, ytr[b], cfg.pk, cfg.operator, cfg.m,
                                                 cfg.loss_mode)
                with np.errstate(over="ignore"):
                    batch_total = float(losses.sum()) if losses is not None else np.nan
                if not (np.isfinite(batch_total) and np.all(np.isfinite(dlogits))):
                    raise TrainingError(f"non-finite loss in epoch {epoch} at batch offset {start} "
                                        f"(operator={cfg.operator.operator}, "
                                        f"smoothing={cfg.operator.smoothing})")
                total += batch_total
                grads = model.backward(acts, dlogits / len(b))
                opt.step(model.params, grads)
            acc = {s: topk_accuracy(model, X, y, ks) for s, (X, y) in parts.items()}
            rec = MetricsRecord(epoch, total / len(ytr), acc)
            records.append(rec)
            if sink:
                sink.write(rec.to_json() + "\n")
            score = _criterion(acc["val"], k_max)
            if score > best_score:
                best, best_score, since = model.copy(), score, 0
            else:
                since += 1
                if since >= cfg.patience:
                    log.info("early stop at epoch %d", epoch)
                    break
    finally:
        if sink:
            sink.close()
    return best, records


def evaluate(model, ds: Dataset, ks=(1, 2, 3, 4, 5)) -> dict:
    ks = [k for k in ks if k <= ds.n_classes]
    return {s: topk_accuracy(model, *ds.part(s), ks) for s in SPLITS}


def temperature_grid(lo: float, hi: float) -> list[float]:
    if lo <= 0 or hi < lo:
        raise ValueError("empty temperature grid")
    grid, t = [], lo
    while t <= hi * (1 + 1e-12):
        grid.append(t)
        t *= 2.0
    return grid


def grid_search_temperature(ds: Dataset, cfg: TrainConfig, tau_range: tuple[float, float]):
    """Train once per grid point ``lo * 2**j <= hi``; keep the best validation
    score, ties going to the smaller value. Returns (best value, results)."""
    results = []
    best_tau, best_score = None, -np.inf
    k_max = min(cfg.k_max, ds.n_classes)
    for tau in temperature_grid(*tau_range):
        run = replace(cfg, operator=cfg.operator.with_smoothing(tau))
        model, _ = train(ds, run)
        acc = topk_accuracy(model, *ds.part("val"), sorted({1, k_max}))
        score = _criterion(acc, k_max)
        results.append({"tau": tau, "score": score, "val": acc})
        if score > best_score:
            best_tau, best_score = tau, score
    return best_tau, results


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    return json.loads(json.dumps(d, default=str))
