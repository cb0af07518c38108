"""Dropping ensembles: bagged, dropout-trained members combined by a weighted vote."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .encoders import ModelConfig, PairModel, load_model, save_model
from .errors import ConfigurationError, InputError, NumericError, StateError
from .losses import PROB_FLOOR, evaluate
from .training import TrainConfig, train_model

log = logging.getLogger(__name__)

AVERAGING_MODES = ("arithmetic", "geometric")
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class BagConfig:
    n_members: int = 10
    sample_fraction: float = 1.0
    with_replacement: bool = True
    dropout: float = 0.5
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.n_members < 1:
            raise ConfigurationError("an ensemble needs at least one member")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ConfigurationError(f"sample_fraction must lie in (0, 1], got {self.sample_fraction}")


@dataclass
class MemberMeta:
    bag_seed: int
    dropout: float
    dev_score: float
    excluded: bool = False


@dataclass
class DroppingEnsemble:
    members: list[PairModel]
    alpha: np.ndarray
    meta: list[MemberMeta]
    averaging: str = "arithmetic"

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.averaging not in AVERAGING_MODES:
            raise ConfigurationError(f"averaging must be one of {AVERAGING_MODES}")
        if len(self.alpha) != len(self.members):
            raise StateError(f"{len(self.alpha)} vote weights for {len(self.members)} members")

    def __len__(self):
        return len(self.members)

    @property
    def n_classes(self) -> int:
        return self.members[0].config.n_classes

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256(self.alpha.tobytes())
        for m in self.members:
            h.update(m.fingerprint().encode())
        return h.hexdigest()

    def predict_proba(self, s1, s2, batch_size: int = 256) -> np.ndarray:
        return ensemble_predict(self, s1, s2, batch_size)


def bag_sample(n: int, config: BagConfig, rng: np.random.Generator) -> np.ndarray:
    """Indices of one bag: ceil(fraction * n) uniform draws (with replacement by default)."""
    if n < 1:
        raise InputError("cannot bag an empty dataset")
    if not config.sample_fraction > 0:
        raise ConfigurationError("sample_fraction must be positive")
    size = int(math.ceil(config.sample_fraction * n))
    if config.with_replacement:
        return rng.integers(0, n, size=size)
    return rng.permutation(n)[:size]


def softmax_weights(scores, temperature: float) -> np.ndarray:
    """alpha = softmax(scores / temperature)."""
    if not temperature > 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    z = np.asarray(scores, dtype=np.float64) / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def combine_member_probs(member_probs: np.ndarray, alpha: np.ndarray,
                         averaging: str = "arithmetic") -> np.ndarray:
    """Weighted vote over stacked member outputs of shape (N, B, M)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if averaging == "arithmetic":
        return np.tensordot(alpha, member_probs, axes=1)
    if averaging == "geometric":
        logp = np.tensordot(alpha, np.log(np.maximum(member_probs, PROB_FLOOR)), axes=1)
        logp -= logp.max(axis=-1, keepdims=True)
        p = np.exp(logp)
        return p / p.sum(axis=-1, keepdims=True)
    raise ConfigurationError(f"averaging must be one of {AVERAGING_MODES}")


def member_outputs(members, s1, s2, batch_size: int = 256) -> np.ndarray:
    """Inference-mode probabilities of every member, shape (N, B, M)."""
    return np.stack([m.predict_proba(s1, s2, batch_size) for m in members])


def ensemble_predict(ensemble: DroppingEnsemble, s1, s2, batch_size: int = 256) -> np.ndarray:
    """Per-instance vote of the members: arithmetic or renormalised geometric mean."""
    if len(ensemble.members) == 0:
        raise StateError("ensemble has no usable members")
    probs = member_outputs(ensemble.members, s1, s2, batch_size)
    return combine_member_probs(probs, ensemble.alpha, ensemble.averaging)


# ---------------------------------------------------------------- training

def _train_member(args):
    index, seed, train, dev, model_config, config = args
    rng = np.random.default_rng(seed)
    bag = bag_sample(len(train[2]), config, rng)
    s1, s2, y = train
    bagged = ([s1[i] for i in bag], [s2[i] for i in bag], y[bag])
    model = PairModel.init(replace(model_config, dropout=config.dropout), rng)
    try:
        train_model(model, bagged, config.train, rng, dev=dev)
    except NumericError as exc:
        log.warning("member %d diverged and is excluded: %s", index, exc)
        return index, seed, None, float("nan")
    score = evaluate(model.predict_proba(dev[0], dev[1]), dev[2])["accuracy"] / 100.0
    return index, seed, model, score


def member_seeds(seed: int, n: int) -> list[int]:
    """Independent per-member seeds split deterministically from one root seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


def train_dropping_ensemble(train, dev, model_config: ModelConfig, config: BagConfig,
                            seed: int = 0, jobs: int = 1,
                            averaging: str = "arithmetic") -> DroppingEnsemble:
    """Train ``n_members`` models, each on its own bag and with dropout.

    ``train`` and ``dev`` are encoded ``(s1, s2, labels)`` triples. Members
    whose loss goes non-finite are dropped with a warning. Vote weights start
    uniform over the surviving members; dev accuracy is kept as each member's
    score for later reweighting.
    """
    if len(train[2]) == 0 or len(dev[2]) == 0:
        raise InputError("train and dev splits must be non-empty")
    seeds = member_seeds(seed, config.n_members)
    tasks = [(i, s, train, dev, model_config, config) for i, s in enumerate(seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_member, tasks))
    else:
        results = [_train_member(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    members, meta = [], []
    for _, s, model, score in results:
        if model is None:
            meta.append(MemberMeta(s, config.dropout, score, excluded=True))
            continue
        members.append(model)
        meta.append(MemberMeta(s, config.dropout, score))
    if not members:
        raise StateError("every ensemble member diverged")
    alpha = np.full(len(members), 1.0 / len(members))
    return DroppingEnsemble(members, alpha, meta, averaging)


def exclude_members(ensemble: DroppingEnsemble, keep: list[int]) -> DroppingEnsemble:
    """Keep only the listed member positions and renormalise alpha.

    Positions index ``ensemble.members``; the meta entries of dropped members
    stay in place, flagged as excluded.
    """
    keep = sorted(set(keep))
    if not keep:
        raise StateError("ensemble has no usable members")
    if keep[-1] >= len(ensemble.members) or keep[0] < 0:
        raise StateError(f"member position out of range: {keep}")
    alpha = ensemble.alpha[keep]
    total = alpha.sum()
    alpha = alpha / total if total > 0 else np.full(len(keep), 1.0 / len(keep))
    meta, pos = [], 0
    for m in ensemble.meta:
        if m.excluded:
            meta.append(m)
            continue
        meta.append(replace(m, excluded=pos not in keep))
        pos += 1
    return DroppingEnsemble([ensemble.members[k] for k in keep], alpha, meta, ensemble.averaging)


# ---------------------------------------------------------------- persistence

def save_ensemble(ensemble: DroppingEnsemble, directory) -> None:
    """Member checkpoints plus ``manifest.json`` (alpha, seeds, scores, config)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, model in enumerate(ensemble.members):
        name = f"member_{i:03d}.ckpt"
        save_model(model, directory / name)
        files.append(name)
    manifest = {
        "version": MANIFEST_VERSION,
        "averaging": ensemble.averaging,
        "alpha": [float(a) for a in ensemble.alpha],
        "member_files": files,
        "members": [asdict(m) for m in ensemble.meta],
        "model_config": asdict(ensemble.members[0].config),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_ensemble(directory) -> DroppingEnsemble:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise InputError(f"unsupported ensemble manifest version in {directory}")
    members = [load_model(directory / f) for f in manifest["member_files"]]
    meta = [MemberMeta(**m) for m in manifest["members"]]
    return DroppingEnsemble(members, np.array(manifest["alpha"]), meta, manifest["averaging"])
