"""Siamese GRU pair classifier with optional cross-sentence attention.

Both sentences of a pair are encoded by the same (tied) recurrent stack unless
``ModelConfig.tied`` is false. Batches are padded to the longest sentence and
masked, which reproduces per-sequence processing exactly: padded steps carry
the previous hidden state forward and padded positions get zero attention.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, InputError, ShapeError

ATTENTION_MODES = ("none", "cross")
FUSION_MODES = ("full", "symmetric")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_classes: int = 2
    embed_dim: int = 16
    hidden_size: int = 24
    num_layers: int = 2
    bidirectional: bool = False
    attention: str = "none"
    fusion: str = "full"
    tied: bool = True
    dropout: float = 0.5

    def __post_init__(self):
        if self.vocab_size < 1 or self.n_classes < 2:
            raise ConfigurationError("vocab_size must be >= 1 and n_classes >= 2")
        if self.num_layers not in (1, 2):
            raise ConfigurationError(f"num_layers must be 1 or 2, got {self.num_layers}")
        if self.attention not in ATTENTION_MODES:
            raise ConfigurationError(f"attention must be one of {ATTENTION_MODES}")
        if self.fusion not in FUSION_MODES:
            raise ConfigurationError(f"fusion must be one of {FUSION_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def state_width(self) -> int:
        return self.hidden_size * (2 if self.bidirectional else 1)

    @property
    def feature_width(self) -> int:
        return self.state_width * (4 if self.fusion == "full" else 3)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class GruLayerParams:
    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @property
    def hidden_size(self) -> int:
        return self.U_z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, hidden: int, prefix: str = ""):
        def w(name, fan_in):
            return ad.xavier_uniform(rng, fan_in, hidden, name=prefix + name)

        return cls(
            W_z=w("W_z", input_dim), W_r=w("W_r", input_dim), W_h=w("W_h", input_dim),
            U_z=w("U_z", hidden), U_r=w("U_r", hidden), U_h=w("U_h", hidden),
            b_z=ad.zeros_param(hidden, name=prefix + "b_z"),
            b_r=ad.zeros_param(hidden, name=prefix + "b_r"),
            b_h=ad.zeros_param(hidden, name=prefix + "b_h"),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {prefix + f.name: getattr(self, f.name) for f in fields(self)}


def gru_step(x_t, h_prev, params: GruLayerParams) -> Tensor:
    """One GRU update. Accepts single vectors or (batch, dim) rows."""
    x_t, h_prev = ad.as_tensor(x_t), ad.as_tensor(h_prev)
    vector = x_t.ndim == 1
    if vector:
        x_t = x_t.reshape(1, -1)
        h_prev = h_prev.reshape(1, -1)
    if x_t.shape[1] != params.input_dim or h_prev.shape[1] != params.hidden_size:
        raise ShapeError(f"gru_step got input {x_t.shape} and state {h_prev.shape} for "
                         f"a ({params.input_dim} -> {params.hidden_size}) cell")
    z = ad.sigmoid(x_t @ params.W_z + h_prev @ params.U_z + params.b_z)
    r = ad.sigmoid(x_t @ params.W_r + h_prev @ params.U_r + params.b_r)
    h_tilde = ad.tanh(x_t @ params.W_h + (r * h_prev) @ params.U_h + params.b_h)
    h = (1.0 - z) * h_prev + z * h_tilde
    return h.reshape(-1) if vector else h


def run_gru(x: Tensor, mask: np.ndarray, params: GruLayerParams) -> tuple[Tensor, Tensor]:
    """Run a GRU layer over a padded batch.

    Returns per-step states (B, T, H) and the state after each sequence's last
    valid token (B, H).
    """
    B, T, D = x.shape
    H = params.hidden_size
    if D != params.input_dim:
        raise ShapeError(f"GRU layer expects input width {params.input_dim}, got {D}")
    W = ad.concat([params.W_z, params.W_r, params.W_h], axis=1)
    b = ad.concat([params.b_z, params.b_r, params.b_h], axis=0)
    U_zr = ad.concat([params.U_z, params.U_r], axis=1)
    proj = (x.reshape(B * T, D) @ W + b).reshape(B, T, 3 * H)
    proj_zr = proj[:, :, : 2 * H]
    proj_h = proj[:, :, 2 * H:]
    h = Tensor(np.zeros((B, H)))
    outs = []
    for t in range(T):
        zr = ad.sigmoid(proj_zr[:, t, :] + h @ U_zr)
        z = zr[:, :H]
        r = zr[:, H:]
        h_tilde = ad.tanh(proj_h[:, t, :] + (r * h) @ params.U_h)
        h_new = (1.0 - z) * h + z * h_tilde
        m = mask[:, t:t + 1]
        if m.all():
            h = h_new
        else:
            mf = m.astype(np.float64)
            h = h_new * mf + h * (1.0 - mf)
        outs.append(h)
    return ad.stack(outs, axis=1), h


def attend(h_t, sources, W_c, mask: np.ndarray | None = None):
    """Dot-score attention of target state(s) over source states.

    Single instance: ``h_t`` (W,), ``sources`` (S, W). Batched: (B, W) and
    (B, S, W) with an optional (B, S) validity mask. Returns
    ``(alpha, context, attention_vector)`` where the attention vector is
    ``tanh(W_c [context; h_t])``.
    """
    h_t, sources = ad.as_tensor(h_t), ad.as_tensor(sources)
    single = h_t.ndim == 1
    if single:
        h_t = h_t.reshape(1, -1)
        sources = sources.reshape(1, *sources.shape)
    B, S, W = sources.shape
    if h_t.shape != (B, W):
        raise ShapeError(f"attention width mismatch: target {h_t.shape}, sources {sources.shape}")
    if mask is None:
        mask = np.ones((B, S), dtype=bool)
    scores = ad.tensor_sum(sources * h_t.reshape(B, 1, W), axis=2)
    alpha = ad.masked_softmax(scores, mask, axis=1)
    context = ad.tensor_sum(sources * alpha.reshape(B, S, 1), axis=1)
    a = ad.tanh(ad.concat([context, h_t], axis=1) @ W_c)
    if single:
        return alpha.reshape(S), context.reshape(W), a.reshape(-1)
    return alpha, context, a


def pad_batch(seqs: Sequence[Sequence[int]], vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Pad id lists to the longest one. Returns (ids, lengths)."""
    if not seqs:
        raise InputError("empty batch")
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if lengths.min() == 0:
        raise InputError("cannot encode an empty token sequence")
    T = int(lengths.max())
    ids = np.zeros((len(seqs), T), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise InputError(f"token id outside vocabulary of size {vocab_size}")
    return ids, lengths


def _reverse_index(lengths: np.ndarray, T: int) -> np.ndarray:
    """Flat row index reversing each sequence within its own length."""
    B = len(lengths)
    t = np.arange(T)[None, :]
    L = lengths[:, None]
    within = np.where(t < L, L - 1 - t, t)
    return (np.arange(B)[:, None] * T + within).reshape(-1)


class PairModel:
    """Embeddings, a 1-2 layer (bi)GRU stack, attention, and a softmax head."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.frozen: set[str] = set()

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "PairModel":
        params: dict[str, Tensor] = {}
        n_enc = 1 if config.tied else 2
        dirs = ("fwd", "bwd") if config.bidirectional else ("fwd",)
        for e in range(n_enc):
            params[f"enc{e}.embedding"] = ad.xavier_uniform(
                rng, config.vocab_size, config.embed_dim, name=f"enc{e}.embedding")
            in_dim = config.embed_dim
            for layer in range(config.num_layers):
                for d in dirs:
                    prefix = f"enc{e}.l{layer}.{d}."
                    params.update(GruLayerParams.init(
                        rng, in_dim, config.hidden_size, prefix).named(prefix))
                in_dim = config.state_width
        if config.attention == "cross":
            params["W_c"] = ad.xavier_uniform(rng, 2 * config.state_width, config.state_width,
                                              name="W_c")
        params["out.W"] = ad.xavier_uniform(rng, config.feature_width, config.n_classes,
                                            name="out.W")
        params["out.b"] = ad.zeros_param(config.n_classes, name="out.b")
        return cls(config, params)

    # ------------------------------------------------------------ parameters
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def layer(self, encoder: int, layer: int, direction: str) -> GruLayerParams:
        prefix = f"enc{encoder}.l{layer}.{direction}."
        return GruLayerParams(**{f.name: self.params[prefix + f.name]
                                 for f in fields(GruLayerParams)})

    def lower_layer_names(self) -> list[str]:
        """Embedding tables and first GRU layer: the frozen set for lower-layer transfer."""
        return [k for k in self.params
                if k.endswith(".embedding") or ".l0." in k]

    def copy(self) -> "PairModel":
        clone = PairModel(self.config, {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                                        for k, v in self.params.items()})
        clone.frozen = set(self.frozen)
        return clone

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------ forward
    def encode(self, seqs, rng=None, training=False, encoder: int = 0):
        """Encode a batch of id lists.

        Returns ``(states, finals, mask)``: top-layer states (B, T, W), the
        per-direction final states concatenated (B, W), and the (B, T) mask.
        """
        cfg = self.config
        ids, lengths = pad_batch(seqs, cfg.vocab_size)
        B, T = ids.shape
        mask = np.arange(T)[None, :] < lengths[:, None]
        x = ad.index_rows(self.params[f"enc{encoder}.embedding"], ids.reshape(-1))
        x = x.reshape(B, T, cfg.embed_dim)
        rev = _reverse_index(lengths, T) if cfg.bidirectional else None
        finals = None
        for layer in range(cfg.num_layers):
            if layer > 0:
                x = ad.dropout(x, cfg.dropout, rng, training)
            states, final = run_gru(x, mask, self.layer(encoder, layer, "fwd"))
            finals = [final]
            if cfg.bidirectional:
                width = x.shape[2]
                x_rev = ad.index_rows(x.reshape(B * T, width), rev).reshape(B, T, width)
                states_rev, final_b = run_gru(x_rev, mask, self.layer(encoder, layer, "bwd"))
                H = cfg.hidden_size
                back = ad.index_rows(states_rev.reshape(B * T, H), rev).reshape(B, T, H)
                states = ad.concat([states, back], axis=2)
                finals.append(final_b)
            x = states
        final = finals[0] if len(finals) == 1 else ad.concat(finals, axis=1)
        return x, final, mask

    def features(self, s1, s2, rng=None, training=False) -> Tensor:
        cfg = self.config
        n = len(s1)
        if len(s2) != n:
            raise InputError(f"{n} first sentences but {len(s2)} second sentences")
        if cfg.tied:
            states, finals, mask = self.encode(list(s1) + list(s2), rng, training)
            st1, st2 = states[:n], states[n:]
            f1, f2 = finals[:n], finals[n:]
            m1, m2 = mask[:n], mask[n:]
        else:
            st1, f1, m1 = self.encode(s1, rng, training, encoder=0)
            st2, f2, m2 = self.encode(s2, rng, training, encoder=1)
        if cfg.attention == "cross":
            # each sentence's summary attends over the other sentence's states
            T2, T1 = int(m2.sum(1).max()), int(m1.sum(1).max())
            _, _, v1 = attend(f1, st2[:, :T2, :], self.params["W_c"], m2[:, :T2])
            _, _, v2 = attend(f2, st1[:, :T1, :], self.params["W_c"], m1[:, :T1])
        else:
            v1, v2 = f1, f2
        diff = ad.absolute(v1 - v2)
        prod = v1 * v2
        if cfg.fusion == "full":
            feat = ad.concat([v1, v2, diff, prod], axis=1)
        else:
            feat = ad.concat([v1 + v2, diff, prod], axis=1)
        return ad.dropout(feat, cfg.dropout, rng, training)

    def logits(self, s1, s2, rng=None, training=False) -> Tensor:
        feat = self.features(s1, s2, rng, training)
        return feat @ self.params["out.W"] + self.params["out.b"]

    def forward(self, s1, s2, rng=None, training=False) -> Tensor:
        """Class probabilities (B, M) for a batch of id-list pairs."""
        return ad.softmax(self.logits(s1, s2, rng, training), axis=1)

    def predict_proba(self, s1, s2, batch_size: int = 256) -> np.ndarray:
        out = []
        with ad.no_grad():
            for i in range(0, len(s1), batch_size):
                out.append(self.forward(s1[i:i + batch_size], s2[i:i + batch_size]).data)
        return np.concatenate(out, axis=0)


def encode_sequence(tokens: Sequence[int], model: PairModel, rng=None, training=False,
                    encoder: int = 0) -> list[np.ndarray]:
    """Top-layer state for every timestep of a single sentence."""
    if len(tokens) == 0:
        raise InputError("cannot encode an empty token sequence")
    states, _, _ = model.encode([list(tokens)], rng, training, encoder)
    return [states.data[0, t].copy() for t in range(len(tokens))]


def classify_pair(s1: Sequence[int], s2: Sequence[int], model: PairModel, rng=None,
                  training=False) -> np.ndarray:
    probs = model.forward([list(s1)], [list(s2)], rng, training)
    return probs.data[0].copy()


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"DRPNCKPT"
CHECKPOINT_VERSION = 1


def save_model(model: PairModel, path) -> None:
    """Write a deterministic binary checkpoint.

    Layout: magic, u32 version, u32 header length, JSON header (config,
    tensor names/shapes/offsets, frozen names), then raw little-endian
    float64 payloads in header order.
    """
    names = sorted(model.params)
    entries, offset, blobs = [], 0, []
    for name in names:
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f8")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps({"config": asdict(model.config), "tensors": entries,
                         "frozen": sorted(model.frozen)}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_model(path) -> PairModel:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise InputError(f"{path} is not a model checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise InputError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    body = raw[16 + hlen:]
    params = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"])
        params[e["name"]] = Tensor(arr.astype(np.float64).reshape(e["shape"]),
                                   requires_grad=True, name=e["name"])
    model = PairModel(ModelConfig.from_dict(header["config"]), params)
    model.frozen = set(header.get("frozen", []))
    return model
