"""Network building blocks: linear maps, PReLU, dropout, layer norm,
softmax, multi-head self-attention, the encoder block, and losses."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DataError
from .tensor import (
    Tensor,
    absolute,
    as_tensor,
    concatenate,
    exp,
    log,
    matmul,
    mul,
    power,
    tensor_mean,
    tensor_sum,
)


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    bound = float(np.sqrt(6.0 / (shape[0] + shape[1])))
    return rng.uniform(-bound, bound, size=shape)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = out + b
    return out


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """max(x, 0) + slope * min(x, 0), with a learnable slope."""
    pos = np.asarray(x.data > 0, dtype=np.float64)
    return mul(x, pos) + mul(slope, mul(x, 1.0 - pos))


def dropout(x: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return mul(x, mask)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    m = tensor_mean(x, axis=-1, keepdims=True)
    centered = x - m
    var = tensor_mean(power(centered, 2.0), axis=-1, keepdims=True)
    xhat = centered * power(var + eps, -0.5)
    return mul(xhat, gamma) + beta


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = np.max(x.data, axis=axis, keepdims=True)  # constant, gradient-safe
    e = exp(x - shift)
    return e / tensor_sum(e, axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = np.max(x.data, axis=axis, keepdims=True)
    z = x - shift
    return z - log(tensor_sum(exp(z), axis=axis, keepdims=True))


# ----------------------------------------------------------------------------
# Self-attention
# ----------------------------------------------------------------------------


@dataclass
class AttentionParams:
    """Per-head query/key/value maps plus the output projection."""

    heads: list[tuple[Tensor, Tensor, Tensor]]  # (Wq, Wk, Wv), each (d_model, d_head)
    w_out: Tensor  # (d_model, d_model)
    b_out: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, d_model: int, n_heads: int) -> "AttentionParams":
        if d_model % n_heads != 0:
            raise ConfigError(f"n_heads={n_heads} must divide d_model={d_model}")
        d_head = d_model // n_heads
        heads = [
            tuple(
                Tensor(xavier_uniform(rng, (d_model, d_head)), requires_grad=True)
                for _ in range(3)
            )
            for _ in range(n_heads)
        ]
        return cls(
            heads=heads,
            w_out=Tensor(xavier_uniform(rng, (d_model, d_model)), requires_grad=True),
            b_out=Tensor(np.zeros(d_model), requires_grad=True),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for h, (wq, wk, wv) in enumerate(self.heads):
            out[f"{prefix}.h{h}.wq"] = wq
            out[f"{prefix}.h{h}.wk"] = wk
            out[f"{prefix}.h{h}.wv"] = wv
        out[f"{prefix}.w_out"] = self.w_out
        out[f"{prefix}.b_out"] = self.b_out
        return out


def self_attention(tokens: Tensor, params: AttentionParams) -> tuple[Tensor, list[Tensor]]:
    """Scaled dot-product self-attention over an unordered token list.

    Weights per head are the softmax over all tokens of the query/key
    scalar products; outputs are the weighted value sums, head-concatenated
    and projected. Returns (outputs, per-head weight matrices).
    """
    tokens = as_tensor(tokens)
    if tokens.data.ndim != 2 or tokens.shape[0] == 0:
        raise DataError(f"self_attention expects a non-empty (n, d) token matrix, got {tokens.shape}")
    d_model = tokens.shape[1]
    if params.heads[0][0].shape[0] != d_model:
        raise DataError(
            f"token dimension {d_model} does not match attention params {params.heads[0][0].shape}"
        )
    d_head = params.heads[0][0].shape[1]
    scale = 1.0 / float(np.sqrt(d_head))
    outs = []
    weights = []
    for wq, wk, wv in params.heads:
        q = matmul(tokens, wq)
        k = matmul(tokens, wk)
        v = matmul(tokens, wv)
        scores = mul(matmul(q, k.T), scale)
        w = softmax(scores, axis=-1)
        weights.append(w)
        outs.append(matmul(w, v))
    merged = concatenate(outs, axis=1) if len(outs) > 1 else outs[0]
    return linear(merged, params.w_out, params.b_out), weights


# ----------------------------------------------------------------------------
# Transformer encoder block (post-norm, as in the original architecture)
# ----------------------------------------------------------------------------


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    ln1_g: Tensor
    ln1_b: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    ff_slope: Tensor
    w_ff2: Tensor
    b_ff2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    @classmethod
    def create(
        cls, rng: np.random.Generator, d_model: int, d_ff: int, n_heads: int
    ) -> "EncoderLayerParams":
        return cls(
            attn=AttentionParams.create(rng, d_model, n_heads),
            ln1_g=Tensor(np.ones(d_model), requires_grad=True),
            ln1_b=Tensor(np.zeros(d_model), requires_grad=True),
            w_ff1=Tensor(xavier_uniform(rng, (d_model, d_ff)), requires_grad=True),
            b_ff1=Tensor(np.zeros(d_ff), requires_grad=True),
            ff_slope=Tensor(0.25, requires_grad=True),
            w_ff2=Tensor(xavier_uniform(rng, (d_ff, d_model)), requires_grad=True),
            b_ff2=Tensor(np.zeros(d_model), requires_grad=True),
            ln2_g=Tensor(np.ones(d_model), requires_grad=True),
            ln2_b=Tensor(np.zeros(d_model), requires_grad=True),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.attn.named(f"{prefix}.attn")
        for name in ("ln1_g", "ln1_b", "w_ff1", "b_ff1", "ff_slope", "w_ff2", "b_ff2", "ln2_g", "ln2_b"):
            out[f"{prefix}.{name}"] = getattr(self, name)
        return out


def encoder_layer(
    x: Tensor,
    params: EncoderLayerParams,
    p_drop: float,
    rng: np.random.Generator,
    train: bool,
) -> tuple[Tensor, list[Tensor]]:
    attn_out, weights = self_attention(x, params.attn)
    x = layer_norm(x + dropout(attn_out, p_drop, rng, train), params.ln1_g, params.ln1_b)
    h = prelu(linear(x, params.w_ff1, params.b_ff1), params.ff_slope)
    ff = linear(h, params.w_ff2, params.b_ff2)
    x = layer_norm(x + dropout(ff, p_drop, rng, train), params.ln2_g, params.ln2_b)
    return x, weights


# ----------------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------------


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    return tensor_mean(power(pred - np.asarray(target, dtype=np.float64), 2.0))


def l1_masked_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean absolute error over valid positions; 0 (with a warning) when
    everything is masked out."""
    mask = np.asarray(mask, dtype=np.float64)
    total = float(mask.sum())
    if total == 0:
        warnings.warn("all positions masked; loss defined as 0", stacklevel=2)
        return mul(tensor_sum(mul(pred, 0.0)), 0.0)
    target = np.where(mask > 0, np.asarray(target, dtype=np.float64), 0.0)
    diff = absolute(mul(pred - target, mask))
    return tensor_sum(diff) / total


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer class targets."""
    targets = np.asarray(targets, dtype=np.intp)
    n, n_classes = logits.shape
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), targets] = 1.0
    lp = log_softmax(logits, axis=-1)
    return mul(tensor_sum(mul(lp, onehot)), -1.0 / n)
