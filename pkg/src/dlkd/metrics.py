"""Top-k accuracy and model evaluation on held-out clips."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dlkd.enhance import enhance
from dlkd.errors import ParameterError
from dlkd.model import forward
from dlkd.tensor import Tensor, no_grad

VARIANTS = ("baseline", "teacher", "student")


def top_k_accuracy(logits_batch, labels, k):
    """Fraction of rows whose label ranks in the top k.

    Ties rank the lower class index first, so with all-equal logits only
    class indices < k count as hits.
    """
    logits = np.atleast_2d(np.asarray(logits_batch.data if isinstance(logits_batch, Tensor) else logits_batch))
    labels = np.asarray(labels).reshape(-1)
    n, num_classes = logits.shape
    if n == 0:
        raise ParameterError("top_k_accuracy needs a non-empty batch")
    if not 1 <= k <= num_classes:
        raise ParameterError(f"k must be in [1, {num_classes}], got {k}")
    if labels.shape != (n,):
        raise ParameterError(f"{labels.shape[0]} labels for {n} logit rows")
    true = logits[np.arange(n), labels][:, None]
    ahead = (logits > true) | ((logits == true) & (np.arange(num_classes) < labels[:, None]))
    rank = ahead.sum(axis=1)
    return float((rank < k).mean())


@dataclass(frozen=True)
class MetricsRecord:
    variant: str
    top1: float
    top5: float
    n: int
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.top1 <= self.top5 <= 1:
            raise ParameterError(f"need 0 <= top1 <= top5 <= 1, got {self.top1}, {self.top5}")


def predict_logits(model, dataset, enhance_params=None, batch_size=32):
    """Stacked logits [N,K] in dataset order; enhancement only if params are given."""
    out = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            clips = dataset.clips[start : start + batch_size]
            if enhance_params is not None:
                clips = [enhance(c, enhance_params) for c in clips]
            batch = np.stack([c.data for c in clips])
            out.append(forward(model, Tensor(batch)).data)
    return np.concatenate(out)


def evaluate(model, test, enhance_params=None, variant=None, seed=0):
    """Top-1/top-5 on ``test``. Raw clips unless ``enhance_params`` (teacher evaluation)."""
    if variant is None:
        variant = "teacher" if enhance_params is not None else "student"
    logits = predict_logits(model, test, enhance_params)
    labels = test.labels
    k5 = min(5, logits.shape[1])
    return MetricsRecord(
        variant,
        top_k_accuracy(logits, labels, 1),
        top_k_accuracy(logits, labels, k5),
        len(test),
        seed,
    )
