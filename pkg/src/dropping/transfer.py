"""Source -> target transfer.

The Dropping transfer blends a fixed pool of source-ensemble members with a
target model trained from scratch on a few-shot sample::

    y_hat = gamma * source_vote + (1 - gamma) * target_probs,   gamma = exp(-delta)

``delta`` grows with the slope of the smoothed dev-error curve, so the source
influence fades as the target starts learning. Hard parameter transfer and
frozen-lower-layer fine-tuning are provided as baselines.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import PairDataset
from .encoders import ModelConfig, PairModel
from .ensemble import (DroppingEnsemble, combine_member_probs, member_outputs,
                       softmax_weights)
from .errors import ConfigurationError, NumericError, ShapeError
from .losses import evaluate
from .smoothing import ErrorCurve, SmootherConfig, estimate_delta, smooth_values
from .training import TrainConfig, fit

GAMMA_MODES = ("slope_driven", "fixed_decay", "constant")
ALPHA_MODES = ("softmax", "uniform", "fixed")
BASELINES = ("dropping", "hard_full", "freeze_lower")


# ---------------------------------------------------------------- gamma schedule

@dataclass(frozen=True)
class GammaSchedule:
    """Decay state of the source/target mixing coefficient.

    In ``slope_driven`` mode each update adds ``delta_scale * |slope|`` to the
    accumulated delta (slope in error per iteration) and gamma = exp(-delta).
    """

    mode: str = "slope_driven"
    gamma: float = 1.0
    delta_accum: float = 0.0
    decay_rate: float = 0.9
    delta_scale: float = 10.0

    def __post_init__(self):
        if self.mode not in GAMMA_MODES:
            raise ConfigurationError(f"gamma mode must be one of {GAMMA_MODES}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.delta_accum < 0 or self.delta_scale < 0:
            raise ConfigurationError("delta_accum and delta_scale must be >= 0")
        if not 0.0 < self.decay_rate <= 1.0:
            raise ConfigurationError("decay_rate must lie in (0, 1]")

    @classmethod
    def from_delta(cls, delta_accum: float, **kw) -> "GammaSchedule":
        return cls(gamma=min(1.0, max(0.0, math.exp(-delta_accum))), delta_accum=delta_accum, **kw)


def gamma_from_delta(schedule: GammaSchedule, delta_raw: float) -> GammaSchedule:
    if not math.isfinite(delta_raw):
        return schedule
    if schedule.mode == "slope_driven":
        accum = schedule.delta_accum + abs(delta_raw) * schedule.delta_scale
        return replace(schedule, delta_accum=accum, gamma=min(1.0, max(0.0, math.exp(-accum))))
    if schedule.mode == "fixed_decay":
        return replace(schedule, gamma=min(1.0, max(0.0, schedule.gamma * schedule.decay_rate)))
    return schedule


def combine_outputs(source, target, gamma: float):
    """Convex blend ``gamma * source + (1 - gamma) * target``.

    ``target`` may be a Tensor, in which case only it receives gradient.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ConfigurationError(f"gamma must lie in [0, 1], got {gamma}")
    src = np.asarray(source, dtype=np.float64)
    if isinstance(target, ad.Tensor):
        if src.shape != target.shape:
            raise ShapeError(f"source output {src.shape} vs target output {target.shape}")
        return ad.add(ad.Tensor(gamma * src), ad.mul(target, 1.0 - gamma))
    tgt = np.asarray(target, dtype=np.float64)
    if src.shape != tgt.shape:
        raise ShapeError(f"source output {src.shape} vs target output {tgt.shape}")
    return gamma * src + tgt * (1.0 - gamma)


# ---------------------------------------------------------------- source pools

@dataclass
class SourcePool:
    """All members of all source ensembles under one vote-weight vector."""

    members: list[PairModel]
    alpha: np.ndarray
    source_index: np.ndarray
    source_weights: np.ndarray
    averaging: str = "arithmetic"

    @property
    def n_classes(self) -> int:
        return self.members[0].config.n_classes

    def outputs(self, ds: PairDataset) -> np.ndarray:
        s1, s2, _ = ds.encoded()
        return member_outputs(self.members, s1, s2)

    def vote(self, outputs: np.ndarray) -> np.ndarray:
        return combine_member_probs(outputs, self.alpha, self.averaging)

    def source_mass(self) -> np.ndarray:
        """Total vote weight held by each source ensemble."""
        return np.bincount(self.source_index, weights=self.alpha,
                           minlength=len(self.source_weights))


def _normalised(weights, n: int) -> np.ndarray:
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(w) != n or np.any(w < 0) or w.sum() <= 0:
        raise ConfigurationError(f"need {n} non-negative source weights, got {weights}")
    return w / w.sum()


def build_pool(sources: Sequence[DroppingEnsemble], weights=None) -> SourcePool:
    """Pool source ensembles; member alpha = source weight x within-source alpha."""
    if not sources:
        raise ConfigurationError("at least one source ensemble is required")
    classes = {s.n_classes for s in sources}
    if len(classes) != 1:
        raise ConfigurationError(f"source ensembles disagree on class count: {sorted(classes)}")
    w = _normalised(weights, len(sources))
    members, alpha, index = [], [], []
    for k, src in enumerate(sources):
        members.extend(src.members)
        alpha.extend(w[k] * src.alpha)
        index.extend([k] * len(src.members))
    return SourcePool(members, np.array(alpha), np.array(index), w, sources[0].averaging)


def reweight_pool(pool: SourcePool, dev_outputs: np.ndarray, dev_labels: np.ndarray,
                  mode: str = "softmax", temperature: float = 0.05) -> tuple[SourcePool, np.ndarray]:
    """Reset member vote weights from target-dev performance.

    ``softmax``: alpha_i proportional to source_weight * exp(acc_i / temperature).
    ``uniform``: plain averaging, each source's weight split evenly over its
    members. ``fixed``: keep the current alpha. Returns the pool and the
    member dev accuracies (fractions).
    """
    if mode not in ALPHA_MODES:
        raise ConfigurationError(f"alpha mode must be one of {ALPHA_MODES}")
    scores = (dev_outputs.argmax(axis=2) == dev_labels[None, :]).mean(axis=1)
    if mode == "softmax":
        logits = scores / temperature + np.log(pool.source_weights[pool.source_index])
        alpha = softmax_weights(logits, 1.0)
    elif mode == "uniform":
        counts = np.bincount(pool.source_index)
        alpha = pool.source_weights[pool.source_index] / counts[pool.source_index]
    else:
        alpha = pool.alpha
    return replace(pool, alpha=np.asarray(alpha, dtype=np.float64)), scores


def zero_shot_eval(sources, test: PairDataset, weights=None) -> dict[str, float]:
    """Accuracy / log-loss of the (pooled) source vote on a target test set."""
    pool = sources if isinstance(sources, SourcePool) else build_pool(sources, weights)
    if pool.n_classes != test.n_classes:
        raise ConfigurationError(f"sources predict {pool.n_classes} classes, target has "
                                 f"{test.n_classes}")
    return evaluate(pool.vote(pool.outputs(test)), test.labels)


# ---------------------------------------------------------------- parameter transfer

def hard_transfer(source: PairModel, target_config: ModelConfig | None = None) -> PairModel:
    """Copy every parameter of ``source`` by value."""
    if target_config is not None and target_config != source.config:
        raise ConfigurationError("hard transfer needs identical architectures; got "
                                 f"{source.config} vs {target_config}")
    model = source.copy()
    model.frozen = set()
    return model


def resize_head(model: PairModel, n_classes: int, rng: np.random.Generator) -> PairModel:
    """Same network with a freshly initialised output layer for ``n_classes``."""
    cfg = replace(model.config, n_classes=n_classes)
    out = model.copy()
    out.config = cfg
    out.params["out.W"] = ad.xavier_uniform(rng, cfg.feature_width, n_classes, name="out.W")
    out.params["out.b"] = ad.zeros_param(n_classes, name="out.b")
    return out


def freeze_lower(source: PairModel) -> PairModel:
    """Copy of ``source`` with embeddings and the first GRU layer frozen."""
    if source.config.num_layers < 2:
        raise ConfigurationError("lower-layer transfer needs a source with >= 2 GRU layers")
    model = hard_transfer(source)
    model.frozen = set(model.lower_layer_names())
    return model


def freeze_lower_finetune(source: PairModel, train: PairDataset, config: TrainConfig,
                          rng: np.random.Generator, on_step=None) -> PairModel:
    """Fine-tune layer 2, attention and head on target data; lower layers stay fixed."""
    model = freeze_lower(source)
    fit(model, train.encoded(), config, rng, on_step=on_step)
    return model


# ---------------------------------------------------------------- few-shot training

@dataclass
class TransferPlan:
    target_config: ModelConfig
    train: TrainConfig
    sources: list[DroppingEnsemble] = field(default_factory=list)
    source_weights: tuple[float, ...] | None = None
    schedule: GammaSchedule = field(default_factory=GammaSchedule)
    smoother: SmootherConfig = field(default_factory=SmootherConfig)
    alpha_mode: str = "softmax"
    temperature: float = 0.05
    baseline: str = "dropping"
    source_model: PairModel | None = None
    seed: int = 0
    diagnostics_dir: str | None = None

    def validate(self):
        if self.baseline not in BASELINES:
            raise ConfigurationError(f"baseline must be one of {BASELINES}")
        if self.alpha_mode not in ALPHA_MODES:
            raise ConfigurationError(f"alpha mode must be one of {ALPHA_MODES}")
        if self.baseline == "dropping":
            if not self.sources:
                raise ConfigurationError("dropping transfer needs at least one source ensemble")
            _normalised(self.source_weights, len(self.sources))
            if self.smoother.update_interval % self.train.eval_every:
                raise ConfigurationError("update interval must be a multiple of eval_every")
        elif self.source_model is None:
            raise ConfigurationError(f"{self.baseline} baseline needs a source model")

    def echo(self) -> dict:
        return {
            "baseline": self.baseline,
            "target_config": asdict(self.target_config),
            "train": asdict(self.train),
            "schedule": asdict(self.schedule),
            "smoother": asdict(self.smoother),
            "alpha_mode": self.alpha_mode,
            "temperature": self.temperature,
            "n_sources": len(self.sources),
            "source_weights": None if self.source_weights is None else list(self.source_weights),
            "seed": self.seed,
        }


@dataclass
class TransferReport:
    config: dict
    points: list[dict] = field(default_factory=list)
    metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)
    alpha: list[float] = field(default_factory=list)
    member_scores: list[float] = field(default_factory=list)
    source_mass: list[float] = field(default_factory=list)
    pool: SourcePool | None = field(default=None, repr=False)

    @property
    def gammas(self) -> list[float]:
        return [p["gamma"] for p in self.points]

    def write_curve_csv(self, path) -> None:
        write_curve_csv(self.points, path)

    def write(self, path) -> None:
        payload = {"config": self.config, "metrics": self.metrics, "alpha": self.alpha,
                   "member_dev_scores": self.member_scores, "source_mass": self.source_mass,
                   "curve": self.points}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


CURVE_FIELDS = ("iteration", "error", "smoothed", "delta", "gamma")


def write_curve_csv(points: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(CURVE_FIELDS)
        for p in points:
            writer.writerow([p["iteration"], _num(p["error"]), _num(p["smoothed"]),
                             _num(p["delta"]), _num(p["gamma"])])


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def read_curve_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({"iteration": int(row["iteration"]), "error": float(row["error"]),
                         "smoothed": float(row["smoothed"]) if row["smoothed"] else None,
                         "delta": float(row["delta"]) if row["delta"] else None,
                         "gamma": float(row["gamma"])})
    return rows


def target_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(initialisation rng, training rng) for the target model."""
    init, train = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init), np.random.default_rng(train)


class _BlendMonitor:
    """Dev-error tracking and gamma updates at every evaluation point."""

    def __init__(self, dev_data, dev_vote, schedule, smoother):
        self.s1, self.s2, self.y = dev_data
        self.dev_vote = dev_vote
        self.schedule = schedule
        self.smoother = smoother
        self.curve = ErrorCurve()
        self.points: list[dict] = []

    def on_eval(self, iteration: int, model: PairModel) -> bool:
        probs = model.predict_proba(self.s1, self.s2)
        if self.dev_vote is not None:
            probs = combine_outputs(self.dev_vote, probs, self.schedule.gamma)
        error = 1.0 - evaluate(probs, self.y)["accuracy"] / 100.0
        self.curve.append(iteration, error)
        smoothed = smooth_values(self.curve, self.smoother)
        delta = None
        if self.dev_vote is not None:
            delta = estimate_delta(self.curve, self.smoother)
            if delta is not None:
                self.schedule = gamma_from_delta(self.schedule, delta)
        self.points.append({"iteration": iteration, "error": error,
                            "smoothed": None if smoothed is None else float(smoothed[-1]),
                            "delta": None if delta is None else float(delta),
                            "gamma": float(self.schedule.gamma)})
        return False


def _train_few_shot(model: PairModel, few: PairDataset, dev: PairDataset, test: PairDataset,
                    config: TrainConfig, rng: np.random.Generator, report: TransferReport,
                    votes: dict[str, np.ndarray] | None, schedule: GammaSchedule,
                    smoother: SmootherConfig, diagnostics_dir=None, on_step=None) -> PairModel:
    monitor = _BlendMonitor(dev.encoded(), None if votes is None else votes["dev"],
                            schedule, smoother)
    blend = None
    if votes is not None:
        train_vote = votes["train"]

        def blend(probs, idx):
            return combine_outputs(train_vote[idx], probs, monitor.schedule.gamma)

    try:
        result = fit(model, few.encoded(), config, rng, blend=blend, monitor=monitor,
                     on_step=on_step)
    except NumericError as exc:
        if diagnostics_dir is not None:
            path = Path(diagnostics_dir) / "diverged_curve.csv"
            write_curve_csv(monitor.points, path)
            raise NumericError(f"{exc}; curve written to {path}") from exc
        raise
    report.points = monitor.points
    report.losses = result.losses
    gamma = monitor.schedule.gamma
    for split, ds in (("train", few), ("test", test)):
        s1, s2, y = ds.encoded()
        probs = model.predict_proba(s1, s2)
        if votes is not None:
            probs = combine_outputs(votes[split], probs, gamma)
        report.metrics[split] = evaluate(probs, y)
    report.config["final_gamma"] = gamma
    return model


def few_shot_dropping_transfer(plan: TransferPlan, few: PairDataset, dev: PairDataset,
                               test: PairDataset, on_step=None) -> tuple[PairModel, TransferReport]:
    """Train a target model from scratch, blended with the pooled source vote.

    Source members are only run in inference mode, once per split; their
    outputs are cached, so the sources are never modified.
    """
    plan.validate()
    pool = build_pool(plan.sources, plan.source_weights)
    if pool.n_classes != plan.target_config.n_classes or pool.n_classes != few.n_classes:
        raise ConfigurationError("source and target class counts differ")
    outputs = {"train": pool.outputs(few), "dev": pool.outputs(dev), "test": pool.outputs(test)}
    pool, scores = reweight_pool(pool, outputs["dev"], dev.labels, plan.alpha_mode,
                                 plan.temperature)
    votes = {k: pool.vote(v) for k, v in outputs.items()}
    report = TransferReport(plan.echo(), alpha=[float(a) for a in pool.alpha],
                            member_scores=[float(s) for s in scores],
                            source_mass=[float(m) for m in pool.source_mass()])
    report.pool = pool
    init_rng, train_rng = target_rngs(plan.seed)
    model = PairModel.init(plan.target_config, init_rng)
    _train_few_shot(model, few, dev, test, plan.train, train_rng, report, votes, plan.schedule,
                    plan.smoother, plan.diagnostics_dir, on_step)
    return model, report


def train_target_only(target_config: ModelConfig, config: TrainConfig, few: PairDataset,
                      dev: PairDataset, test: PairDataset, seed: int = 0,
                      smoother: SmootherConfig | None = None,
                      init_from: PairModel | None = None,
                      on_step=None) -> tuple[PairModel, TransferReport]:
    """Few-shot training without sources (optionally starting from transferred weights)."""
    smoother = smoother or SmootherConfig()
    init_rng, train_rng = target_rngs(seed)
    model = init_from if init_from is not None else PairModel.init(target_config, init_rng)
    report = TransferReport({"baseline": "target_only" if init_from is None else "transferred",
                             "target_config": asdict(model.config), "train": asdict(config),
                             "seed": seed})
    _train_few_shot(model, few, dev, test, config, train_rng, report, None,
                    GammaSchedule(mode="constant", gamma=0.0), smoother, on_step=on_step)
    return model, report


def run_transfer(plan: TransferPlan, few: PairDataset, dev: PairDataset,
                 test: PairDataset) -> tuple[PairModel, TransferReport]:
    """Dispatch on the plan's baseline kind."""
    plan.validate()
    if plan.baseline == "dropping":
        return few_shot_dropping_transfer(plan, few, dev, test)
    start = hard_transfer(plan.source_model) if plan.baseline == "hard_full" \
        else freeze_lower(plan.source_model)
    model, report = train_target_only(plan.target_config, plan.train, few, dev, test,
                                      plan.seed, plan.smoother, init_from=start)
    report.config = {**plan.echo(), **{"final_gamma": report.config.get("final_gamma")}}
    return model, report
