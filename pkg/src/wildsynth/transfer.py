"""Screening-classifier evaluation over precomputed feature vectors.

Trains a linear probe or a one-hidden-layer MLP on features of
synthetic images and evaluates on features of real images with AUROC
and balanced accuracy, plus stratified k-fold cross-validation on the
training split. Feature extraction happens upstream; this module only
consumes 768-dimensional vectors from a CSV file and records that
file's content hash for auditability.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateInputError, SchemaError

FEATURE_DIM = 768
SPLIT_TRAIN = "train_synthetic"
SPLIT_TEST = "test_real"


@dataclass(frozen=True)
class FeatureRecord:
    id: str
    split: str
    label: int
    vector: np.ndarray

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.vector.shape != (FEATURE_DIM,):
            raise ValueError(f"vector must have {FEATURE_DIM} dims")


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "linear"  # "linear" | "mlp"
    hidden_units: int = 256
    l2: float = 1e-4
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 32
    grad_tol: float = 1e-6
    max_iter: int = 5000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"unknown head kind {self.kind!r}")


@dataclass(frozen=True)
class EvalReport:
    head_kind: str
    auroc: float
    balanced_accuracy: float
    recall_healthy: float
    recall_suspect: float
    n_train: int
    n_test: int
    cv_mean: Optional[float] = None
    cv_std: Optional[float] = None
    feature_file_sha256: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "head_kind": self.head_kind,
            "auroc": self.auroc,
            "balanced_accuracy": self.balanced_accuracy,
            "recall_healthy": self.recall_healthy,
            "recall_suspect": self.recall_suspect,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "cv_mean": self.cv_mean,
            "cv_std": self.cv_std,
            "feature_file_sha256": self.feature_file_sha256,
        }


def load_features(path: str | Path) -> list[FeatureRecord]:
    """Parse the feature CSV (header: id,split,label,f0..f767).

    Schema violations are fatal and name the offending row.
    """
    expected_header = ["id", "split", "label"] + [f"f{i}" for i in range(FEATURE_DIM)]
    records: list[FeatureRecord] = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if header != expected_header:
            raise SchemaError(
                f"row 1: bad header, expected id,split,label,f0..f{FEATURE_DIM - 1}"
            )
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3 + FEATURE_DIM:
                raise SchemaError(
                    f"row {lineno}: expected {3 + FEATURE_DIM} fields, got {len(parts)}"
                )
            rec_id, split, label_text = parts[0], parts[1], parts[2]
            if split not in (SPLIT_TRAIN, SPLIT_TEST):
                raise SchemaError(f"row {lineno}: unknown split {split!r}")
            try:
                label = int(label_text)
                vector = np.array(parts[3:], dtype=np.float64)
            except ValueError as exc:
                raise SchemaError(f"row {lineno}: {exc}") from exc
            if label not in (0, 1):
                raise SchemaError(f"row {lineno}: label must be 0 or 1")
            records.append(FeatureRecord(rec_id, split, label, vector))
    return records


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def split_records(
    records: Sequence[FeatureRecord],
) -> tuple[list[FeatureRecord], list[FeatureRecord]]:
    train = [r for r in records if r.split == SPLIT_TRAIN]
    test = [r for r in records if r.split == SPLIT_TEST]
    return train, test


def _design(records: Sequence[FeatureRecord]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([r.vector for r in records])
    y = np.array([r.label for r in records], dtype=np.float64)
    return X, y


def class_weights(y: np.ndarray) -> np.ndarray:
    """Per-sample weights n / (2 * n_class); both classes required."""
    n = len(y)
    n_pos = int(y.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("training data must contain both classes")
    w_pos = n / (2.0 * n_pos)
    w_neg = n / (2.0 * n_neg)
    return np.where(y == 1, w_pos, w_neg)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def linear_value_and_grad(
    w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, c: np.ndarray, l2: float
) -> tuple[float, np.ndarray, float]:
    """Class-weighted logistic loss with L2 on the weights (not the bias)."""
    z = X @ w + b
    losses = np.logaddexp(0.0, z) - y * z  # stable -log likelihood
    value = float(np.mean(c * losses)) + 0.5 * l2 * float(w @ w)
    residual = c * (_sigmoid(z) - y) / len(y)
    grad_w = X.T @ residual + l2 * w
    grad_b = float(residual.sum())
    return value, grad_w, grad_b


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray
    bias: float

    def scores(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(X @ self.weights + self.bias)


def train_linear(records: Sequence[FeatureRecord], cfg: HeadConfig = HeadConfig()) -> LinearModel:
    """Full-batch gradient descent with backtracking line search.

    Starts from zero (seed-free) and stops when the gradient norm drops
    under grad_tol or max_iter is reached.
    """
    X, y = _design(records)
    c = class_weights(y)
    w = np.zeros(X.shape[1])
    b = 0.0
    step = 1.0
    for _ in range(cfg.max_iter):
        value, grad_w, grad_b = linear_value_and_grad(w, b, X, y, c, cfg.l2)
        grad_sq = float(grad_w @ grad_w) + grad_b * grad_b
        if np.sqrt(grad_sq) < cfg.grad_tol:
            break
        step = min(step * 2.0, 1e4)
        while step > 1e-16:
            w_new = w - step * grad_w
            b_new = b - step * grad_b
            trial, _, _ = linear_value_and_grad(w_new, b_new, X, y, c, cfg.l2)
            if trial <= value - 1e-4 * step * grad_sq:
                break
            step *= 0.5
        w, b = w_new, b_new
    return LinearModel(weights=w, bias=b)


@dataclass(frozen=True)
class MlpModel:
    w1: np.ndarray  # (dim, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: float

    def scores(self, X: np.ndarray) -> np.ndarray:
        hidden = np.maximum(X @ self.w1 + self.b1, 0.0)
        return _sigmoid(hidden @ self.w2 + self.b2)


def mlp_value_and_grad(
    model: MlpModel, X: np.ndarray, y: np.ndarray, c: np.ndarray, l2: float
) -> tuple[float, MlpModel]:
    """Loss and backprop gradients (returned in model shape)."""
    pre = X @ model.w1 + model.b1
    hidden = np.maximum(pre, 0.0)
    z = hidden @ model.w2 + model.b2
    losses = np.logaddexp(0.0, z) - y * z
    value = float(np.mean(c * losses)) + 0.5 * l2 * (
        float(np.sum(model.w1 * model.w1)) + float(model.w2 @ model.w2)
    )
    dz = c * (_sigmoid(z) - y) / len(y)
    grad_w2 = hidden.T @ dz + l2 * model.w2
    grad_b2 = float(dz.sum())
    dhidden = np.outer(dz, model.w2) * (pre > 0.0)
    grad_w1 = X.T @ dhidden + l2 * model.w1
    grad_b1 = dhidden.sum(axis=0)
    return value, MlpModel(w1=grad_w1, b1=grad_b1, w2=grad_w2, b2=grad_b2)


def init_mlp(dim: int, hidden: int, seed: int) -> MlpModel:
    rng = np.random.Generator(np.random.PCG64(seed))
    return MlpModel(
        w1=rng.normal(0.0, np.sqrt(2.0 / dim), size=(dim, hidden)),
        b1=np.zeros(hidden),
        w2=rng.normal(0.0, np.sqrt(1.0 / hidden), size=hidden),
        b2=0.0,
    )


def train_mlp(records: Sequence[FeatureRecord], cfg: HeadConfig = HeadConfig(kind="mlp")) -> MlpModel:
    """Mini-batch SGD at a fixed learning rate; rectifier hidden layer.

    Deterministic for a given seed: seeded init and a seeded per-epoch
    shuffle fix the batch order. Zero epochs returns the initialization.
    """
    X, y = _design(records)
    c = class_weights(y)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    model = init_mlp(X.shape[1], cfg.hidden_units, seed=cfg.seed)
    n = len(y)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            _, grads = mlp_value_and_grad(model, X[batch], y[batch], c[batch], cfg.l2)
            model = MlpModel(
                w1=model.w1 - cfg.lr * grads.w1,
                b1=model.b1 - cfg.lr * grads.b1,
                w2=model.w2 - cfg.lr * grads.w2,
                b2=model.b2 - cfg.lr * grads.b2,
            )
    return model


def train_head(records: Sequence[FeatureRecord], cfg: HeadConfig):
    return train_mlp(records, cfg) if cfg.kind == "mlp" else train_linear(records, cfg)


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-based (Mann-Whitney) AUROC with half credit for ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("AUROC needs both classes present")
    order = np.argsort(s, kind="mergesort")
    sorted_scores = s[order]
    # Average rank of each element within its tie group (1-based).
    left = np.searchsorted(sorted_scores, sorted_scores, side="left")
    right = np.searchsorted(sorted_scores, sorted_scores, side="right")
    ranks = np.empty_like(s)
    ranks[order] = (left + right + 1) / 2.0
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def balanced_accuracy(
    scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5
) -> float:
    """Mean of sensitivity and specificity at the threshold (>= is positive)."""
    sens, spec = class_recalls(scores, labels, threshold)
    return (sens + spec) / 2.0


def class_recalls(
    scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5
) -> tuple[float, float]:
    """(sensitivity on label 1, specificity on label 0)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("balanced accuracy needs both classes present")
    pred = s >= threshold
    sensitivity = float(np.sum(pred & (y == 1))) / n_pos
    specificity = float(np.sum(~pred & (y == 0))) / n_neg
    return sensitivity, specificity


def stratified_folds(
    labels: np.ndarray, k: int, seed: int
) -> list[np.ndarray]:
    """Index folds preserving class balance; sizes differ by at most one.

    Each class's leftover items (count mod k) go to whichever folds are
    currently smallest, so the per-class and total size bounds both hold.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    folds: list[list[int]] = [[] for _ in range(k)]
    fold_sizes = np.zeros(k, dtype=int)
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < k:
            raise DegenerateInputError(
                f"class {cls} has {len(idx)} examples, fewer than k={k}"
            )
        idx = rng.permutation(idx)
        base, extra = divmod(len(idx), k)
        counts = np.full(k, base)
        for f in sorted(range(k), key=lambda f: (fold_sizes[f], f))[:extra]:
            counts[f] += 1
        pos = 0
        for f in range(k):
            folds[f].extend(idx[pos : pos + counts[f]].tolist())
            pos += counts[f]
        fold_sizes += counts
    return [np.array(sorted(fold)) for fold in folds]


def kfold_cv(
    records: Sequence[FeatureRecord],
    cfg: HeadConfig,
    k: int = 5,
    seed: int = 0,
) -> tuple[float, float]:
    """Stratified k-fold CV; returns (mean, population std) of fold AUROCs."""
    X, y = _design(records)
    folds = stratified_folds(y, k, seed)
    aucs = []
    for i, fold in enumerate(folds):
        held = set(fold.tolist())
        train = [records[j] for j in range(len(records)) if j not in held]
        model = train_head(train, cfg)
        scores = model.scores(X[fold])
        aucs.append(auroc(scores, y[fold]))
    return float(np.mean(aucs)), float(np.std(aucs))


def evaluate(
    train: Sequence[FeatureRecord],
    test: Sequence[FeatureRecord],
    cfg: HeadConfig,
    cv_folds: Optional[int] = None,
    cv_seed: int = 0,
    feature_file_sha256: Optional[str] = None,
) -> EvalReport:
    """Train on the synthetic split, evaluate on the real split."""
    model = train_head(train, cfg)
    X_test, y_test = _design(test)
    scores = model.scores(X_test)
    sens, spec = class_recalls(scores, y_test)
    cv_mean = cv_std = None
    if cv_folds:
        cv_mean, cv_std = kfold_cv(train, cfg, k=cv_folds, seed=cv_seed)
    return EvalReport(
        head_kind=cfg.kind,
        auroc=auroc(scores, y_test),
        balanced_accuracy=(sens + spec) / 2.0,
        recall_healthy=spec,
        recall_suspect=sens,
        n_train=len(train),
        n_test=len(test),
        cv_mean=cv_mean,
        cv_std=cv_std,
        feature_file_sha256=feature_file_sha256,
    )
