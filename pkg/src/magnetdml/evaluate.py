"""Evaluation: k-nearest-cluster and soft kNN classification, error rates,
attribute precision curves, and hierarchy recovery."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, ContractError


@dataclass
class EvalContext:
    """References for kernel-mass classification: cluster centers (kNC) or
    example representations (soft kNN) with their class tags, the training
    variance and the retrieval size L."""

    references: np.ndarray
    classes: np.ndarray
    sigma2: float
    l: int = 128

    def __post_init__(self):
        self.references = np.atleast_2d(np.asarray(self.references, dtype=np.float64))
        self.classes = np.asarray(self.classes, dtype=np.int64)
        if len(self.references) == 0:
            raise ContractError("evaluation context is empty")
        if self.sigma2 <= 0:
            raise ConfigurationError("sigma2 must be positive")
        if self.l < 1:
            raise ConfigurationError("L must be >= 1")


def _retrieve_scores(ctx: EvalContext, reps: np.ndarray) -> np.ndarray:
    """Per-class kernel mass over each query's L nearest references, (n, C)."""
    reps = np.atleast_2d(np.asarray(reps, dtype=np.float64))
    refs = ctx.references
    d2 = np.maximum(
        (reps * reps).sum(1)[:, None] + (refs * refs).sum(1)[None, :] - 2.0 * reps @ refs.T,
        0.0,
    )
    l = min(ctx.l, len(refs))
    n_classes = int(ctx.classes.max()) + 1
    scores = np.zeros((len(reps), n_classes))
    inv2s = 1.0 / (2.0 * ctx.sigma2)
    for i in range(len(reps)):
        nearest = np.argsort(d2[i], kind="stable")[:l]
        logits = -d2[i, nearest] * inv2s
        mass = np.exp(logits - logits.max())
        mass /= mass.sum()
        np.add.at(scores[i], ctx.classes[nearest], mass)
    return scores


def knc_classify(ctx: EvalContext, representation: np.ndarray):
    """Softmax similarity to the L nearest cluster centers; returns the argmax
    class (ties toward the lower index) and normalized per-class scores."""
    scores = _retrieve_scores(ctx, np.atleast_2d(representation))[0]
    return int(scores.argmax()), scores


def soft_knn_classify(ctx: EvalContext, representation: np.ndarray):
    """The kNC rule with reference examples in place of cluster centers."""
    return knc_classify(ctx, representation)


def classify_batch(ctx: EvalContext, representations: np.ndarray) -> np.ndarray:
    return _retrieve_scores(ctx, representations).argmax(axis=1)


def error_rate(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(predictions) == 0 or len(predictions) != len(labels):
        raise ContractError("predictions and labels must be non-empty and aligned")
    return float((predictions != labels).mean())


def attribute_precision(
    representations: np.ndarray,
    attributes: Optional[np.ndarray],
    sizes: Sequence[int],
) -> Dict[int, float]:
    """Mean fraction of nearest neighbours sharing each featured attribute.

    For every (example, attribute) incidence and every neighbourhood size n,
    the fraction of the example's n nearest neighbours (self excluded) that
    also feature the attribute; incidences are pooled per size.
    """
    if attributes is None:
        raise ConfigurationError("dataset has no attributes")
    reps = np.atleast_2d(np.asarray(representations, dtype=np.float64))
    attrs = np.asarray(attributes, dtype=np.float64)
    n = len(reps)
    if any(s < 1 or s >= n for s in sizes):
        raise ConfigurationError("neighbourhood sizes must lie in [1, N)")
    d2 = (reps * reps).sum(1)[:, None] + (reps * reps).sum(1)[None, :] - 2.0 * reps @ reps.T
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")

    out = {}
    for size in sizes:
        neigh = order[:, :size]
        # fraction of neighbours featuring each attribute, per example
        frac = attrs[neigh].mean(axis=1)  # (N, A)
        incident = attrs > 0
        if not incident.any():
            raise ConfigurationError("no attribute incidences")
        out[int(size)] = float(frac[incident].mean())
    return out


def attribute_precision_values(representations, attributes, size: int) -> np.ndarray:
    """Per-incidence precision values at one size (for uncertainty estimates)."""
    reps = np.atleast_2d(np.asarray(representations, dtype=np.float64))
    attrs = np.asarray(attributes, dtype=np.float64)
    d2 = (reps * reps).sum(1)[:, None] + (reps * reps).sum(1)[None, :] - 2.0 * reps @ reps.T
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :size]
    frac = attrs[order].mean(axis=1)
    return frac[attrs > 0]


def hierarchy_recovery_eval(
    train_representations: np.ndarray,
    train_fine_labels: np.ndarray,
    test_representations: np.ndarray,
    test_fine_labels: np.ndarray,
    sigma2: float,
    l: int = 128,
    method: str = "knc",
    clusters_per_class: int = 1,
    seed: int = 0,
) -> Tuple[float, Optional[float]]:
    """Classify test points against FINE labels of the training set and report
    (error@1, error@5); error@5 is None with fewer than 5 fine classes.

    ``method='knc'`` builds K-means centers per fine class over the training
    representations; ``method='soft_knn'`` uses the examples directly.
    """
    train_fine = np.asarray(train_fine_labels)
    test_fine = np.asarray(test_fine_labels)
    n_classes = int(max(train_fine.max(), test_fine.max())) + 1
    if method == "knc":
        from .index import kmeans

        refs, ref_classes = [], []
        for c in range(n_classes):
            members = np.asarray(train_representations)[train_fine == c]
            if len(members) == 0:
                continue
            k = min(clusters_per_class, len(members))
            centers, _, _ = kmeans(members, k, seed=seed + c)
            refs.append(centers)
            ref_classes.extend([c] * k)
        ctx = EvalContext(np.vstack(refs), np.asarray(ref_classes), sigma2, l)
    elif method == "soft_knn":
        ctx = EvalContext(train_representations, train_fine, sigma2, l)
    else:
        raise ConfigurationError(f"unknown method {method!r}")

    scores = _retrieve_scores(ctx, test_representations)
    top1 = scores.argmax(axis=1)
    err1 = error_rate(top1, test_fine)
    if n_classes < 5:
        return err1, None
    # stable top-5: ties resolved toward lower class index
    order = np.argsort(-scores, axis=1, kind="stable")[:, :5]
    hit5 = (order == test_fine[:, None]).any(axis=1)
    return err1, float(1.0 - hit5.mean())


class SigmaTracker:
    """Exponential moving average of minibatch variance estimates."""

    def __init__(self, decay: float = 0.99):
        if not 0 <= decay < 1:
            raise ConfigurationError("decay must lie in [0, 1)")
        self.decay = decay
        self.value: Optional[float] = None

    def update(self, sigma2: float) -> float:
        if self.value is None:
            self.value = float(sigma2)
        else:
            self.value = self.decay * self.value + (1 - self.decay) * float(sigma2)
        return self.value
