"""Adam optimiser and the minibatch training loop shared by every pipeline."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import autodiff as ad
from .encoders import PairModel
from .errors import ConfigurationError, NumericError
from .losses import ClassWeights, cross_entropy, evaluate, weighted_nll

LOSSES = ("ce", "weighted_nll")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 128
    epochs: int = 30
    max_iterations: int | None = None
    eval_every: int = 20
    patience: int | None = 5
    loss: str = "ce"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ConfigurationError("lr, batch_size, eval_every must be positive; epochs >= 0")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"loss must be one of {LOSSES}")


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class Monitor(Protocol):
    def on_eval(self, iteration: int, model: PairModel) -> bool:
        """Called every ``eval_every`` iterations; return True to stop training."""


Blend = Callable[[ad.Tensor, np.ndarray], ad.Tensor]


@dataclass
class FitResult:
    iterations: int = 0
    losses: list[float] = field(default_factory=list)
    stopped_early: bool = False


class EarlyStopping:
    """Tracks dev log-loss; restores the best parameters on ``finish``."""

    def __init__(self, dev, patience: int | None):
        self.s1, self.s2, self.y = dev
        self.patience = patience
        self.best = math.inf
        self.best_params: dict[str, np.ndarray] | None = None
        self.bad = 0
        self.history: list[tuple[int, float]] = []
        self.last: dict[str, float] = {}

    def on_eval(self, iteration: int, model: PairModel) -> bool:
        self.last = evaluate(model.predict_proba(self.s1, self.s2), self.y)
        loss = self.last["log_loss"]
        self.history.append((iteration, loss))
        if loss < self.best:
            self.best, self.bad = loss, 0
            self.best_params = {k: v.data.copy() for k, v in model.params.items()}
        else:
            self.bad += 1
        return self.patience is not None and self.bad >= self.patience

    def finish(self, model: PairModel):
        if self.best_params is not None:
            for k, v in self.best_params.items():
                model.params[k].data[...] = v


def fit(model: PairModel, train, config: TrainConfig, rng: np.random.Generator,
        blend: Blend | None = None, monitor: Monitor | None = None,
        class_weights: ClassWeights | None = None,
        on_step: Callable[[int, PairModel], None] | None = None) -> FitResult:
    """Minibatch Adam training on encoded pairs ``(s1, s2, labels)``.

    ``blend`` maps the target probabilities of a batch (and the batch's row
    indices) to the probabilities the loss sees; it is how source ensembles
    enter few-shot training. Frozen parameters are excluded from updates.
    """
    s1, s2, y = train
    n = len(y)
    if n == 0:
        raise ConfigurationError("cannot train on an empty split")
    if config.loss == "weighted_nll" and class_weights is None:
        raise ConfigurationError("weighted_nll needs class weights")
    opt = Adam(model.trainable(), config.lr, config.beta1, config.beta2, config.adam_eps)
    result = FitResult()
    it = 0
    limit = config.max_iterations
    epoch = 0
    # an iteration budget overrides the epoch count
    while (limit is not None and it < limit) or (limit is None and epoch < config.epochs):
        epoch += 1
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            if limit is not None and it >= limit:
                break
            idx = order[start:start + config.batch_size]
            probs = model.forward([s1[i] for i in idx], [s2[i] for i in idx], rng, training=True)
            if blend is not None:
                probs = blend(probs, idx)
            if config.loss == "ce":
                loss = cross_entropy(probs, y[idx])
            else:
                loss = weighted_nll(probs, y[idx], class_weights)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss at iteration {it}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            it += 1
            result.iterations = it
            result.losses.append(value)
            if on_step is not None:
                on_step(it, model)
            if monitor is not None and it % config.eval_every == 0:
                if monitor.on_eval(it, model):
                    result.stopped_early = True
                    return result
    return result


def train_model(model: PairModel, train, config: TrainConfig, rng: np.random.Generator,
                dev=None, class_weights: ClassWeights | None = None) -> FitResult:
    """Single-task training with early stopping on dev log-loss when ``dev`` is given."""
    stopper = EarlyStopping(dev, config.patience) if dev is not None else None
    result = fit(model, train, config, rng, monitor=stopper, class_weights=class_weights)
    if stopper is not None:
        stopper.finish(model)
    return result
