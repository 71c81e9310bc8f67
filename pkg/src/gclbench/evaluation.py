"""Linear evaluation of frozen embeddings and loss-based early stopping."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import softmax

from .graph import Split

L2_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeParams:
    steps: int = 500
    lr: float = 0.1
    l2_grid: tuple = L2_GRID


@dataclass
class EvalReport:
    per_split: list[float]
    mean: float
    std: float
    seeds: list[int]
    params: dict = field(default_factory=dict)

    @classmethod
    def from_accuracies(cls, accs: Sequence[float], seeds: Sequence[int], params: dict) -> "EvalReport":
        a = np.asarray(accs, dtype=np.float64)
        return cls([float(x) for x in a], float(a.mean()), float(a.std()), [int(s) for s in seeds], params)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(list(doc["per_split"]), doc["mean"], doc["std"], list(doc["seeds"]), dict(doc.get("params", {})))

    def table(self) -> str:
        lines = [f"{'split':>6} {'seed':>8} {'accuracy':>10}"]
        for i, (s, a) in enumerate(zip(self.seeds, self.per_split)):
            lines.append(f"{i:>6} {s:>8} {a:>10.4f}")
        lines.append(f"{'mean':>6} {'':>8} {self.mean:>10.4f}")
        lines.append(f"{'std':>6} {'':>8} {self.std:>10.4f}")
        return "\n".join(lines)


def _standardize(x_train: np.ndarray, *others: np.ndarray) -> list[np.ndarray]:
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return [(x - mu) / sd for x in (x_train, *others)]


def fit_logistic(x: np.ndarray, y: np.ndarray, n_classes: int, l2: float,
                 steps: int = 500, lr: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic regression by full-batch gradient descent with cosine-decayed step size.

    Minimizes mean cross-entropy + (l2 / 2) ||W||^2; the bias is not penalized.
    """
    n, d = x.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    for t in range(steps):
        p = softmax(x @ w + b, axis=1)
        err = (p - onehot) / n
        step = lr * 0.5 * (1.0 + math.cos(math.pi * t / steps))
        w -= step * (x.T @ err + l2 * w)
        b -= step * err.sum(axis=0)
    return w, b


def predict(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.argmax(x @ w + b, axis=1)


def probe_split(emb: np.ndarray, labels: np.ndarray, split: Split, params: ProbeParams) -> tuple[float, float]:
    """Test accuracy of the grid point with the best validation accuracy, and that l2."""
    ytr = labels[split.train_idx]
    if np.unique(ytr).size < 2:
        raise EvaluationError(f"split {split.seed}: training labels contain a single class; "
                              "the probe needs at least two")
    classes = np.unique(labels)
    y = np.searchsorted(classes, labels)
    xtr, xva, xte = _standardize(emb[split.train_idx], emb[split.valid_idx], emb[split.test_idx])
    best = None
    for l2 in params.l2_grid:
        w, b = fit_logistic(xtr, y[split.train_idx], classes.size, l2, params.steps, params.lr)
        val = float(np.mean(predict(xva, w, b) == y[split.valid_idx])) if xva.shape[0] else 0.0
        # ties keep the earlier (weaker) regularization
        if best is None or val > best[0]:
            best = (val, l2, w, b)
    _, l2, w, b = best
    return float(np.mean(predict(xte, w, b) == y[split.test_idx])), l2


def linear_probe(embeddings, labels, splits: Sequence[Split], params: ProbeParams | None = None) -> EvalReport:
    params = params or ProbeParams()
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if emb.ndim != 2 or emb.shape[0] != labels.shape[0]:
        raise EvaluationError(f"embeddings {emb.shape} do not match {labels.shape[0]} labels")
    if not np.all(np.isfinite(emb)):
        raise EvaluationError("embeddings contain non-finite values")
    if np.unique(labels).size < 2:
        raise EvaluationError("the probe needs at least two classes")
    accs, chosen = [], []
    for split in splits:
        acc, l2 = probe_split(emb, labels, split, params)
        accs.append(acc)
        chosen.append(l2)
    meta = {"steps": params.steps, "lr": params.lr, "l2_grid": list(params.l2_grid), "chosen_l2": chosen}
    return EvalReport.from_accuracies(accs, [s.seed for s in splits], meta)


class EarlyStopper:
    """Stops once ``window`` consecutive epochs bring no new strict minimum."""

    def __init__(self, window: int = 50):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self.best_index = -1
        self.best_loss = math.inf
        self.epoch = -1

    def update(self, loss: float) -> bool:
        """Record one epoch's loss; return True when training should halt."""
        self.epoch += 1
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_index = self.epoch
        return self.epoch - self.best_index >= self.window

    @property
    def improved(self) -> bool:
        return self.best_index == self.epoch


def early_stop_monitor(stream: Iterable[float], window: int = 50) -> tuple[int, int]:
    """Consume ``stream`` until the window expires; return (best index, last consumed index)."""
    stopper = EarlyStopper(window)
    for loss in stream:
        if stopper.update(float(loss)):
            break
    if stopper.epoch < 0:
        raise EvaluationError("empty loss stream")
    return stopper.best_index, stopper.epoch
