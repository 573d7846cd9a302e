"""Cross-attention fusion of the two script encoders, pooling, classifier and loss.

One script supplies the queries, the other keys and values. There are no
projection biases and no residual path around the cross-attention: the
pooled classifier input is built entirely from attended key/value vectors.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import attention, zeros
from .errors import ConfigError, DegenerateRowError, DimensionError, LabelError

NUM_CLASSES = 3
LOG_EPS = 1e-12


def head_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> T.Tensor:
    """Gaussian with std ``1/sqrt(fan_in)`` for the layers stacked on top of the encoders."""
    return T.Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)), requires_grad=True)


class FusionHead:
    def __init__(self, d_model: int, num_heads: int = 4, seed: int = 0, pooling: str = "mean",
                 params: dict[str, T.Tensor] | None = None):
        if d_model % num_heads:
            raise ConfigError(f"d_model {d_model} not divisible by fusion heads {num_heads}")
        if pooling not in ("mean", "cls"):
            raise ConfigError(f"pooling must be 'mean' or 'cls', got {pooling!r}")
        self.d_model = d_model
        self.num_heads = num_heads
        self.pooling = pooling
        if params is None:
            rng = np.random.default_rng(seed)
            params = {name: head_weight(rng, d_model, d_model) for name in ("wq", "wk", "wv", "wo")}
            params["cls.w"] = head_weight(rng, d_model, NUM_CLASSES)
            params["cls.b"] = zeros(NUM_CLASSES)
        self.params = params

    def cross_attend(self, h_query: T.Tensor, h_kv: T.Tensor, mask_kv: np.ndarray,
                     weights_out: list | None = None) -> T.Tensor:
        if h_query.ndim != 3 or h_kv.ndim != 3 or h_query.shape[0] != h_kv.shape[0] \
                or h_query.shape[2] != h_kv.shape[2] or h_query.shape[2] != self.d_model:
            raise DimensionError(f"cross_attend shapes {h_query.shape} and {h_kv.shape} incompatible")
        p = self.params
        return attention(h_query, h_kv, mask_kv, p["wq"], p["wk"], p["wv"], p["wo"], self.num_heads,
                         weights_out=weights_out)

    def pool_and_classify(self, fused: T.Tensor, mask_query: np.ndarray) -> T.Tensor:
        return classify(fused, mask_query, self.params["cls.w"], self.params["cls.b"], self.pooling)

    def __call__(self, h_query, h_kv, mask_query, mask_kv) -> T.Tensor:
        return self.pool_and_classify(self.cross_attend(h_query, h_kv, mask_kv), mask_query)


def classify(h: T.Tensor, mask: np.ndarray, w: T.Tensor, b: T.Tensor, pooling: str = "mean") -> T.Tensor:
    """Pool ``h [B,T,d]`` over unmasked positions, apply a linear layer and softmax."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise DegenerateRowError("a row has no unmasked position to pool")
    pooled = T.masked_mean(h, mask) if pooling == "mean" else T.select(h, 0, axis=1)
    return T.softmax_rows(T.matmul(pooled, w) + b)


def ce_loss(probs: T.Tensor, labels) -> T.Tensor:
    """Mean negative log-probability of the true class, log clamped at 1e-12."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != probs.shape[0]:
        raise DimensionError(f"labels {labels.shape} do not match probabilities {probs.shape}")
    if ((labels < 0) | (labels >= probs.shape[1])).any():
        raise LabelError(f"labels must lie in [0, {probs.shape[1]})")
    onehot = np.zeros(probs.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = T.sum_(T.mul(probs, T.Tensor(onehot)), axis=1)
    return T.scale(T.mean(T.log_clamped(picked, LOG_EPS)), -1.0)
