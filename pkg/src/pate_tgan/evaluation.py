"""Synthetic-data utility: train an evaluator on generated rows, test on real rows."""

from dataclasses import asdict, dataclass
from typing import List

import numpy as np
from scipy.stats import rankdata

from .data import Dataset
from .nn import CrossEntropy, apply_update, forward, gradient, init_network, one_hot
from .trainer import ConfigError

EVAL_HIDDEN = 64
EVAL_LR = 0.5
EVAL_BATCH = 64


@dataclass
class EvalReport:
    accuracy: float
    auroc_macro: float
    per_class_accuracy: List[float]
    n_synthetic: int
    n_test: int
    seed: int
    repeats: int = 1

    def to_dict(self):
        return asdict(self)


def generate_dataset(generator, n, seed, stratified=False) -> Dataset:
    """Draw ``n`` labelled rows ``(G(z|y), y)`` with ``y`` uniform over the classes."""
    meta = generator.meta
    m, noise_dim = int(meta["n_classes"]), int(meta["noise_dim"])
    rng = np.random.default_rng(seed)
    if stratified:
        y = np.arange(n) % m
        rng.shuffle(y)
    else:
        y = rng.integers(m, size=n)
    z = rng.standard_normal((n, noise_dim))
    x = forward(generator, np.concatenate([z, one_hot(y, m)], axis=1))
    return Dataset(x, y, name="synthetic")


def auroc_binary(scores, positive) -> float:
    """Mann-Whitney rank statistic; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc_macro(probs, labels) -> float:
    """Unweighted mean of one-vs-rest AUROCs over classes present in ``labels``."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    vals = [auroc_binary(probs[:, c], labels == c) for c in range(probs.shape[1])]
    vals = [v for v in vals if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def train_evaluator(train: Dataset, m, epochs, seed):
    rng = np.random.default_rng(seed)
    net = init_network([train.dim, EVAL_HIDDEN, m], "softmax", rng.integers(2**63 - 1))
    n = len(train)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, EVAL_BATCH):
            idx = perm[start : start + EVAL_BATCH]
            loss = CrossEntropy(train.labels[idx], n_classes=m, scale=1.0 / len(idx))
            net = apply_update(net, gradient(net, train.features[idx], loss), EVAL_LR)
    return net


def evaluate(synthetic: Dataset, real_test: Dataset, epochs=10, seed=0, repeats=1, n_classes=None) -> EvalReport:
    """Train a fresh evaluator on ``synthetic`` and score it on ``real_test``.

    With ``repeats > 1`` the evaluator is retrained from independent seeds and
    the metrics are averaged.
    """
    if synthetic.dim != real_test.dim:
        raise ConfigError(f"synthetic rows have {synthetic.dim} features, test rows {real_test.dim}")
    m = n_classes or max(synthetic.n_classes, real_test.n_classes)
    if real_test.labels.max() >= m or synthetic.labels.max() >= m:
        raise ConfigError("class sets of synthetic and test data do not match")
    accs, aucs, per_class = [], [], []
    for r in range(repeats):
        net = train_evaluator(synthetic, m, epochs, seed + r)
        probs = forward(net, real_test.features)
        pred = probs.argmax(axis=1)
        correct = pred == real_test.labels
        accs.append(float(correct.mean()))
        aucs.append(auroc_macro(probs, real_test.labels))
        per_class.append(
            [float(correct[real_test.labels == c].mean()) if np.any(real_test.labels == c) else float("nan") for c in range(m)]
        )
    return EvalReport(
        accuracy=float(np.mean(accs)),
        auroc_macro=float(np.mean(aucs)),
        per_class_accuracy=[float(v) for v in np.mean(per_class, axis=0)],
        n_synthetic=len(synthetic),
        n_test=len(real_test),
        seed=seed,
        repeats=repeats,
    )
