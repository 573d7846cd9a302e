"""Script-specific transformer encoder (BERT-style post-norm blocks).

Hidden state 0 is the layer-normalized sum of token and position
embeddings; state ``l`` is the output of block ``l``. Every state is
layer-normalized, so states from different layers and encoders live on a
comparable scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, VocabError

INIT_STD = 0.02


@dataclass
class EncoderConfig:
    vocab_size: int
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    max_len: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "num_layers", "num_heads", "d_model", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")

    def to_dict(self):
        return asdict(self)


@dataclass
class EncoderStates:
    hidden: list[T.Tensor]
    mask: np.ndarray

    @property
    def last(self) -> T.Tensor:
        return self.hidden[-1]


def gaussian(rng: np.random.Generator, *shape: int) -> T.Tensor:
    return T.Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)


def zeros(*shape: int) -> T.Tensor:
    return T.Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape: int) -> T.Tensor:
    return T.Tensor(np.ones(shape), requires_grad=True)


def split_heads(x: T.Tensor, num_heads: int) -> T.Tensor:
    B, L, d = x.shape
    return T.transpose(T.reshape(x, (B, L, num_heads, d // num_heads)), (0, 2, 1, 3))


def merge_heads(x: T.Tensor) -> T.Tensor:
    B, H, L, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, L, H * dh))


def attention(q_in: T.Tensor, kv_in: T.Tensor, key_mask: np.ndarray, wq: T.Tensor, wk: T.Tensor,
              wv: T.Tensor, wo: T.Tensor, num_heads: int, biases=None, weights_out: list | None = None):
    """Multi-head attention of ``q_in [B,Tq,d]`` over ``kv_in [B,Tk,d]``.

    Keys where ``key_mask [B,Tk]`` is false get zero weight. ``biases`` is an
    optional (bq, bk, bv, bo) tuple. Scores are scaled by ``1/sqrt(d/num_heads)``.
    """
    q = T.matmul(q_in, wq)
    k = T.matmul(kv_in, wk)
    v = T.matmul(kv_in, wv)
    if biases is not None:
        q, k, v = q + biases[0], k + biases[1], v + biases[2]
    qh, kh, vh = split_heads(q, num_heads), split_heads(k, num_heads), split_heads(v, num_heads)
    d_head = q.shape[-1] // num_heads
    scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(d_head))
    B, H, Tq, Tk = scores.shape
    mask = np.broadcast_to(np.asarray(key_mask, dtype=bool)[:, None, None, :], (B, H, Tq, Tk))
    weights = T.softmax_rows(scores, mask)
    if weights_out is not None:
        weights_out.append(weights.data)
    out = T.matmul(merge_heads(T.matmul(weights, vh)), wo)
    if biases is not None:
        out = out + biases[3]
    return out


class Encoder:
    def __init__(self, config: EncoderConfig, params: dict[str, T.Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else self.init_params(config)

    @staticmethod
    def init_params(cfg: EncoderConfig) -> dict[str, T.Tensor]:
        rng = np.random.default_rng(cfg.seed)
        d, f = cfg.d_model, cfg.d_ff
        p = {
            "tok_emb": gaussian(rng, cfg.vocab_size, d),
            "pos_emb": gaussian(rng, cfg.max_len, d),
            "emb_ln.g": ones(d),
            "emb_ln.b": zeros(d),
        }
        for l in range(cfg.num_layers):
            pre = f"layer{l}."
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + name] = gaussian(rng, d, d)
            for name in ("bq", "bk", "bv", "bo"):
                p[pre + name] = zeros(d)
            p[pre + "ln1.g"], p[pre + "ln1.b"] = ones(d), zeros(d)
            p[pre + "ln2.g"], p[pre + "ln2.b"] = ones(d), zeros(d)
            p[pre + "w1"], p[pre + "b1"] = gaussian(rng, d, f), zeros(f)
            p[pre + "w2"], p[pre + "b2"] = gaussian(rng, f, d), zeros(d)
        return p

    def forward(self, ids: np.ndarray, mask: np.ndarray) -> EncoderStates:
        cfg, p = self.config, self.params
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise VocabError(f"ids must be [batch, length], got shape {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise VocabError(f"token id outside [0, {cfg.vocab_size})")
        B, L = ids.shape
        if L > cfg.max_len:
            raise VocabError(f"sequence length {L} exceeds max_len {cfg.max_len}")
        x = T.embedding(ids, p["tok_emb"]) + T.embedding(np.broadcast_to(np.arange(L), (B, L)), p["pos_emb"])
        x = T.layer_norm(x, p["emb_ln.g"], p["emb_ln.b"])
        hidden = [x]
        for l in range(cfg.num_layers):
            pre = f"layer{l}."
            a = attention(x, x, mask, p[pre + "wq"], p[pre + "wk"], p[pre + "wv"], p[pre + "wo"],
                          cfg.num_heads, biases=(p[pre + "bq"], p[pre + "bk"], p[pre + "bv"], p[pre + "bo"]))
            x = T.layer_norm(x + a, p[pre + "ln1.g"], p[pre + "ln1.b"])
            h = T.gelu(T.matmul(x, p[pre + "w1"]) + p[pre + "b1"])
            x = T.layer_norm(x + (T.matmul(h, p[pre + "w2"]) + p[pre + "b2"]), p[pre + "ln2.g"], p[pre + "ln2.b"])
            hidden.append(x)
        return EncoderStates(hidden, np.asarray(mask, dtype=bool))

    __call__ = forward


def snapshot_frozen(encoder: Encoder) -> Encoder:
    """Independent copy of ``encoder`` whose parameters never take gradients."""
    params = {k: T.Tensor(v.data.copy(), requires_grad=False) for k, v in encoder.params.items()}
    return Encoder(encoder.config, params)
