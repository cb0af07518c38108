"""Cross-entropy, class-weighted NLL, and the accuracy / log-loss metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, InputError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ClassWeights:
    weights: tuple[float, ...]

    def __post_init__(self):
        if not self.weights or any(not w > 0 for w in self.weights):
            raise ConfigurationError(f"class weights must be positive, got {self.weights}")

    def __len__(self):
        return len(self.weights)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)


def _gold_log_probs(pred, gold) -> tuple[ad.Tensor, np.ndarray]:
    pred = ad.as_tensor(pred)
    gold = np.asarray(gold, dtype=np.int64)
    if pred.ndim != 2:
        raise InputError(f"predictions must be (N, M), got shape {pred.shape}")
    n, m = pred.shape
    if gold.shape != (n,):
        raise InputError(f"{n} predictions but {gold.size} gold labels")
    if gold.size and (gold.min() < 0 or gold.max() >= m):
        raise InputError(f"gold labels must lie in [0, {m})")
    picked = ad.getitem(pred, (np.arange(n), gold))
    return ad.log(ad.clamp_min(picked, PROB_FLOOR)), gold


def cross_entropy(pred, gold) -> ad.Tensor:
    """Mean negative log-probability of the gold class.

    ``pred`` holds probability rows (already on the simplex); values are
    clamped at 1e-12 before the log.
    """
    if len(np.atleast_1d(gold)) == 0:
        raise InputError("cross_entropy of an empty batch")
    logp, _ = _gold_log_probs(pred, gold)
    return -ad.mean(logp)


def weighted_nll(pred, gold, weights: ClassWeights) -> ad.Tensor:
    """Class-weighted NLL normalised by the total weight of the batch."""
    if len(np.atleast_1d(gold)) == 0:
        raise InputError("weighted_nll of an empty batch")
    m = ad.as_tensor(pred).shape[-1]
    if len(weights) != m:
        raise ConfigurationError(f"{len(weights)} class weights for {m} classes")
    logp, gold = _gold_log_probs(pred, gold)
    w = weights.as_array()[gold]
    return -ad.tensor_sum(logp * w) * (1.0 / w.sum())


def evaluate(pred, gold) -> dict[str, float]:
    """Accuracy in percent and mean log-loss. Ties in argmax go to the lowest class."""
    p = pred.data if isinstance(pred, ad.Tensor) else np.asarray(pred, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.int64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise InputError("evaluate needs a non-empty (N, M) prediction array")
    if p.shape[0] != gold.shape[0]:
        raise InputError(f"{p.shape[0]} predictions but {gold.shape[0]} gold labels")
    correct = int((np.argmax(p, axis=1) == gold).sum())
    with ad.no_grad():
        ll = cross_entropy(p, gold).item()
    return {"accuracy": 100.0 * correct / p.shape[0], "log_loss": ll}
