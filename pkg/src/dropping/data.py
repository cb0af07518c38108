"""Sentence-pair datasets: loading, vocabulary, rebalancing, sampling, synthetic tasks."""
from __future__ import annotations

import json
import math
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, InputError
from .losses import ClassWeights

OOV_TOKEN = "<unk>"
UNLABELED = "-"
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Token <-> id map; id 0 is the shared out-of-vocabulary slot."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [OOV_TOKEN]
        self.stoi: dict[str, int] = {OOV_TOKEN: 0}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, 0) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]]) -> "Vocabulary":
        counts = Counter(tok for s in sentences for tok in s)
        counts.pop(OOV_TOKEN, None)
        return cls(tok for tok, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.itos):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        pairs = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line:
                tok, idx = line.rsplit("\t", 1)
                pairs.append((int(idx), tok))
        vocab = cls()
        for idx, tok in sorted(pairs):
            if idx == 0:
                continue
            if vocab.add(tok) != idx:
                raise InputError(f"vocabulary file {path} has non-contiguous ids")
        return vocab


@dataclass(frozen=True)
class PairInstance:
    sentence1: tuple[str, ...]
    sentence2: tuple[str, ...]
    label: int
    genre: str | None = None
    pair_id: str = ""


@dataclass
class PairDataset:
    instances: list[PairInstance]
    label_names: tuple[str, ...]
    vocab: Vocabulary
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        for inst in self.instances:
            if not inst.sentence1 or not inst.sentence2:
                raise InputError(f"pair {inst.pair_id!r} has an empty sentence")
            if not 0 <= inst.label < len(self.label_names):
                raise InputError(f"pair {inst.pair_id!r} has label {inst.label} outside "
                                 f"{len(self.label_names)} classes")
        self._encoded = None

    def __len__(self):
        return len(self.instances)

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([i.label for i in self.instances], dtype=np.int64)

    @property
    def genres(self) -> list[str]:
        return sorted({i.genre for i in self.instances if i.genre is not None})

    def encoded(self) -> tuple[list[list[int]], list[list[int]], np.ndarray]:
        """Id lists for both sentences plus the label array (cached)."""
        if self._encoded is None:
            s1 = [self.vocab.encode(i.sentence1) for i in self.instances]
            s2 = [self.vocab.encode(i.sentence2) for i in self.instances]
            self._encoded = (s1, s2, self.labels)
        return self._encoded

    def subset(self, indices: Iterable[int]) -> "PairDataset":
        return PairDataset([self.instances[i] for i in indices], self.label_names, self.vocab)

    def with_instances(self, instances: list[PairInstance]) -> "PairDataset":
        return PairDataset(instances, self.label_names, self.vocab)

    def class_weights(self) -> ClassWeights:
        return class_weights(self)


# ---------------------------------------------------------------- loading

def _read_rows(path: Path, fmt: str):
    """Yield (line_no, label, s1, s2, genre, pair_id) or (line_no, None...) for bad rows."""
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if fmt == "tsv":
                cols = line.split("\t")
                if line_no == 1 and cols[0].strip().lower() in ("label", "gold_label"):
                    continue
                if len(cols) < 3 or len(cols) > 4:
                    yield line_no, None
                    continue
                genre = cols[3].strip() or None if len(cols) == 4 else None
                yield line_no, (cols[0].strip(), cols[1], cols[2], genre, f"L{line_no}")
            else:
                try:
                    obj = json.loads(line)
                    row = (str(obj["gold_label"]).strip(), str(obj["sentence1"]),
                           str(obj["sentence2"]), obj.get("genre"),
                           str(obj.get("pairID", f"L{line_no}")))
                except (json.JSONDecodeError, KeyError, TypeError):
                    yield line_no, None
                    continue
                yield line_no, row


def load_pairs(path, fmt: str = "tsv", vocab: Vocabulary | None = None,
               label_names: Sequence[str] | None = None) -> PairDataset:
    """Load a TSV (``label, s1, s2[, genre]``) or SNLI-style JSONL file.

    Labels map to indices in sorted label-name order unless ``label_names`` is
    given. Rows labelled ``-`` (or with a label outside ``label_names``) are
    dropped and counted; malformed rows are skipped with a warning. A fresh
    vocabulary is built from the file unless ``vocab`` is passed.
    """
    if fmt not in ("tsv", "snli_jsonl", "jsonl"):
        raise ConfigurationError(f"unknown format {fmt!r}")
    path = Path(path)
    rows, malformed, n_rows = [], [], 0
    for line_no, row in _read_rows(path, "tsv" if fmt == "tsv" else "jsonl"):
        n_rows += 1
        if row is None:
            malformed.append(line_no)
            continue
        label, t1, t2, genre, pid = row
        s1, s2 = tokenize(t1), tokenize(t2)
        if not label or not s1 or not s2:
            malformed.append(line_no)
            continue
        rows.append((line_no, label, tuple(s1), tuple(s2), genre, pid))
    for line_no in malformed:
        warnings.warn(f"{path.name}:{line_no}: malformed row skipped", stacklevel=2)
    if n_rows and len(malformed) == n_rows:
        raise InputError(f"{path}: every row is malformed")
    if not rows:
        raise InputError(f"{path}: no usable rows")
    if label_names is None:
        label_names = sorted({r[1] for r in rows if r[1] != UNLABELED})
    label_index = {name: i for i, name in enumerate(label_names)}
    instances, dropped = [], 0
    for _, label, s1, s2, genre, pid in rows:
        if label not in label_index:
            dropped += 1
            continue
        instances.append(PairInstance(s1, s2, label_index[label], genre, pid))
    if vocab is None:
        vocab = Vocabulary.build(s for inst in instances for s in (inst.sentence1, inst.sentence2))
    ds = PairDataset(instances, tuple(label_names), vocab)
    ds.report = {"rows": n_rows, "dropped_unlabeled": dropped, "malformed_lines": malformed}
    return ds


# ---------------------------------------------------------------- augmentation / rebalancing

def pair_swap_augment(ds: PairDataset, rng: np.random.Generator, rate: float) -> PairDataset:
    """Append sentence-order-swapped copies of ceil(rate * n) sampled pairs."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigurationError(f"swap rate must lie in [0, 1], got {rate}")
    count = int(math.ceil(rate * len(ds)))
    picked = np.sort(rng.choice(len(ds), size=count, replace=False)) if count else []
    extra = [replace(ds.instances[i], sentence1=ds.instances[i].sentence2,
                     sentence2=ds.instances[i].sentence1,
                     pair_id=f"{ds.instances[i].pair_id}~swap") for i in picked]
    return ds.with_instances(list(ds.instances) + extra)


def class_weights(ds: PairDataset) -> ClassWeights:
    """Inverse class frequency, normalised to mean 1."""
    counts = np.bincount(ds.labels, minlength=ds.n_classes)
    missing = [ds.label_names[c] for c in np.flatnonzero(counts == 0)]
    if missing:
        raise InputError(f"classes absent from dataset: {missing}")
    inv = counts.sum() / counts
    return ClassWeights(tuple(float(w) for w in inv / inv.mean()))


# ---------------------------------------------------------------- few-shot sampling

def _largest_remainder(shares: dict[str, float]) -> dict[str, int]:
    floors = {g: int(math.floor(s)) for g, s in shares.items()}
    left = int(round(sum(shares.values()))) - sum(floors.values())
    order = sorted(shares, key=lambda g: (-(shares[g] - floors[g]), g))
    for g in order[:max(left, 0)]:
        floors[g] += 1
    return floors


def genre_quotas(sizes: dict[str, int], total: int, minimum: int) -> dict[str, int]:
    """Per-genre sample counts: proportional to genre size, never below ``minimum``.

    Genres whose proportional share falls short are raised to the minimum and
    the remaining budget is re-spread over the rest. When the minimums alone
    exceed ``total`` every genre gets exactly the minimum.
    """
    for g, s in sizes.items():
        if s < minimum:
            raise ConfigurationError(f"genre {g!r} has {s} instances, fewer than {minimum}")
    if total <= minimum * len(sizes):
        return {g: minimum for g in sizes}
    pinned: set[str] = set()
    while True:
        free = [g for g in sizes if g not in pinned]
        budget = total - minimum * len(pinned)
        free_size = sum(sizes[g] for g in free)
        shares = {g: budget * sizes[g] / free_size for g in free}
        short = [g for g in free if shares[g] < minimum]
        if not short:
            break
        pinned.update(short)
    quotas = _largest_remainder(shares)
    quotas.update({g: minimum for g in pinned})
    return {g: min(quotas[g], sizes[g]) for g in sizes}


def few_shot_sample(ds: PairDataset, fraction: float, genre_min: int = 0,
                    rng: np.random.Generator | None = None) -> tuple[PairDataset, PairDataset]:
    """Draw ceil(fraction * n) instances (per-genre minimum enforced) plus the remainder.

    Instances sharing a pair_id always land in the same split.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"fraction must lie in (0, 1), got {fraction}")
    if genre_min < 0:
        raise ConfigurationError("genre_min must be >= 0")
    rng = rng or np.random.default_rng(0)
    groups: dict[str, list[int]] = {}
    for i, inst in enumerate(ds.instances):
        groups.setdefault(inst.pair_id, []).append(i)
    total = int(math.ceil(fraction * len(ds)))
    genre_of = {pid: ds.instances[idx[0]].genre for pid, idx in groups.items()}
    buckets: dict[str | None, list[str]] = {}
    for pid in groups:
        buckets.setdefault(genre_of[pid], []).append(pid)
    if ds.genres:
        sizes = {g: sum(len(groups[p]) for p in buckets[g]) for g in buckets if g is not None}
        quotas: dict[str | None, int] = dict(genre_quotas(sizes, total, genre_min))
        if None in buckets:
            quotas[None] = 0
    else:
        quotas = {None: total}
    chosen: list[int] = []
    for g in sorted(buckets, key=lambda k: (k is None, k or "")):
        pids = buckets[g]
        order = rng.permutation(len(pids))
        taken = 0
        for j in order:
            if taken >= quotas.get(g, 0):
                break
            chosen.extend(groups[pids[j]])
            taken += len(groups[pids[j]])
    chosen_set = set(chosen)
    rest = [i for i in range(len(ds)) if i not in chosen_set]
    return ds.subset(sorted(chosen)), ds.subset(rest)


# ---------------------------------------------------------------- synthetic tasks

SYNTH_RULES = ("overlap_threshold", "order_sensitive")
_RULE_SEED = 20180531


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic pair task.

    ``shift`` is the fraction of vocabulary pairs whose matching relation is
    swapped: under shift s a token ``a`` in an aliased pair only matches its
    partner ``rho(a)``, never itself. Tasks with nearby shifts are related;
    far-apart shifts disagree on most pairs.
    """

    vocab_size: int = 40
    rule: str = "overlap_threshold"
    noise: float = 0.0
    shift: float = 0.0
    size: int = 1000
    threshold: float = 0.5
    min_len: int = 5
    max_len: int = 8
    substitution: float = 0.2

    def __post_init__(self):
        if self.rule not in SYNTH_RULES:
            raise ConfigurationError(f"rule must be one of {SYNTH_RULES}")
        if not 0.0 <= self.noise < 0.5:
            raise ConfigurationError(f"label noise must lie in [0, 0.5), got {self.noise}")
        if not 0.0 <= self.shift <= 1.0:
            raise ConfigurationError("shift must lie in [0, 1]")
        if self.size < 10:
            raise ConfigurationError("synthetic tasks need size >= 10")
        if self.vocab_size < 4 or self.vocab_size % 2:
            raise ConfigurationError("vocab_size must be even and >= 4")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigurationError("need 1 <= min_len <= max_len")


def synth_vocabulary(vocab_size: int) -> Vocabulary:
    width = len(str(vocab_size - 1))
    return Vocabulary(f"w{i:0{width}d}" for i in range(vocab_size))


def _partner_table(vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed involution pairing the tokens, and the order pairs become aliased in."""
    rng = np.random.default_rng(_RULE_SEED + vocab_size)
    perm = rng.permutation(vocab_size)
    partner = np.empty(vocab_size, dtype=np.int64)
    partner[perm[0::2]] = perm[1::2]
    partner[perm[1::2]] = perm[0::2]
    return partner, perm[0::2]


def _relation(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """(match, decoy) token maps for a task: match is the rule, decoy its complement."""
    partner, pair_order = _partner_table(spec.vocab_size)
    n_alias = int(round(spec.shift * len(pair_order)))
    aliased = np.zeros(spec.vocab_size, dtype=bool)
    heads = pair_order[:n_alias]
    aliased[heads] = True
    aliased[partner[heads]] = True
    ident = np.arange(spec.vocab_size)
    match = np.where(aliased, partner, ident)
    decoy = np.where(aliased, ident, partner)
    return match, decoy


def _score(spec: SynthSpec, match: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    mapped = match[a]
    if spec.rule == "overlap_threshold":
        sa, sb = set(mapped.tolist()), set(b.tolist())
        return len(sa & sb) / len(sa | sb)
    n = min(len(a), len(b))
    return float((mapped[:n] == b[:n]).sum()) / max(len(a), len(b))


def synth_task(spec: SynthSpec, rng: np.random.Generator) -> PairDataset:
    """Generate a balanced synthetic pair task labelled by a deterministic rule.

    Overlap rule: label 1 iff the Jaccard overlap between the mapped first
    sentence and the second sentence reaches ``threshold``. Order-sensitive
    rule: the same but counting position-wise agreement. Candidates mix
    perturbed matches, decoys (the complementary relation), and random pairs;
    candidates are labelled by the rule and kept until both classes are full,
    then labels flip with probability ``noise``.
    """
    match, decoy = _relation(spec)
    V = spec.vocab_size
    want = [spec.size // 2, spec.size - spec.size // 2]
    kept: list[list[tuple[np.ndarray, np.ndarray]]] = [[], []]

    def perturb(seq):
        out = seq.copy()
        hit = rng.random(len(out)) < spec.substitution
        out[hit] = rng.integers(0, V, size=int(hit.sum()))
        return out

    while len(kept[0]) < want[0] or len(kept[1]) < want[1]:
        a = rng.integers(0, V, size=int(rng.integers(spec.min_len, spec.max_len + 1)))
        kind = rng.random()
        if kind < 0.5:
            b = perturb(match[a])
        elif kind < 0.75:
            b = perturb(decoy[a])
        else:
            b = rng.integers(0, V, size=int(rng.integers(spec.min_len, spec.max_len + 1)))
        if spec.rule == "order_sensitive" and kind < 0.5 and rng.random() < 0.5:
            b = rng.permutation(b)
        label = int(_score(spec, match, a, b) >= spec.threshold)
        if len(kept[label]) < want[label]:
            kept[label].append((a, b))
    pairs = [(a, b, 0) for a, b in kept[0]] + [(a, b, 1) for a, b in kept[1]]
    order = rng.permutation(len(pairs))
    flips = rng.random(len(pairs)) < spec.noise
    vocab = synth_vocabulary(V)
    instances = []
    for k, j in enumerate(order):
        a, b, label = pairs[j]
        if flips[k]:
            label = 1 - label
        instances.append(PairInstance(tuple(vocab.itos[t + 1] for t in a),
                                      tuple(vocab.itos[t + 1] for t in b),
                                      label, None, f"syn{k}"))
    return PairDataset(instances, ("0", "1"), vocab)
