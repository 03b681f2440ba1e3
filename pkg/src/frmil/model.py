"""The feature re-calibration MIL network and its pooling comparators.

Pipeline per bag: a linear instance scorer picks the highest-probability
(critical) instance; every instance is shifted by that instance's raw
feature and rectified; the shifted features are laid out on a square
grid, filtered by a depthwise 3x3 convolution (an additive positional
perturbation), flattened back, and prefixed with a learnable class token;
a single multi-head attention block then pools the tokens into one bag
feature using the critical instance as the query, and a linear head turns
that into the bag probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import MaskError, Tensor
from .bagdata import InstanceBag


@dataclass
class ModelParams:
    """Every learnable parameter, keyed for the optimizer and checkpoints."""

    dim: int
    heads: int
    scorer_w: Tensor   # (D, 1) instance scorer
    scorer_b: Tensor   # (1,)
    conv_w: Tensor     # (D, 3, 3) depthwise positional filter
    conv_b: Tensor     # (D,)
    class_token: Tensor  # (1, D)
    q_w: Tensor        # (D, D) query projection, and so on
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor
    o_w: Tensor
    o_b: Tensor
    ln_gain: Tensor    # (D,)
    ln_bias: Tensor    # (D,)
    clf_w: Tensor      # (D, 1) bag classifier
    clf_b: Tensor      # (1,)

    def named(self) -> Dict[str, Tensor]:
        skip = ("dim", "heads")
        return {k: v for k, v in self.__dict__.items() if k not in skip}

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.named().values())

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def _uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                  requires_grad=True)


def init_params(dim: int, heads: int, seed: int,
                dtype=np.float32) -> ModelParams:
    """Deterministic initialization under seed.

    The class token is standard normal; linear and convolution weights are
    uniform in +-1/sqrt(fan_in); biases start at zero; layer-norm gain at
    one.
    """
    if dim % heads != 0:
        raise ValueError(f"feature dim {dim} is not divisible by {heads} heads")
    rng = np.random.default_rng(seed)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    params = ModelParams(
        dim=dim, heads=heads,
        scorer_w=_uniform_init(rng, (dim, 1), dim, dtype),
        scorer_b=zeros((1,)),
        conv_w=_uniform_init(rng, (dim, 3, 3), 9, dtype),
        conv_b=zeros((dim,)),
        class_token=Tensor(rng.standard_normal(size=(1, dim)).astype(dtype),
                           requires_grad=True),
        q_w=_uniform_init(rng, (dim, dim), dim, dtype), q_b=zeros((dim,)),
        k_w=_uniform_init(rng, (dim, dim), dim, dtype), k_b=zeros((dim,)),
        v_w=_uniform_init(rng, (dim, dim), dim, dtype), v_b=zeros((dim,)),
        o_w=_uniform_init(rng, (dim, dim), dim, dtype), o_b=zeros((dim,)),
        ln_gain=Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
        ln_bias=zeros((dim,)),
        clf_w=_uniform_init(rng, (dim, 1), dim, dtype),
        clf_b=zeros((1,)),
    )
    return params


@dataclass
class ForwardTrace:
    """Everything one bag forward produced, for losses and inspection."""

    scores: np.ndarray        # (n,) instance probabilities (detached)
    max_index: int
    a_max: Tensor             # (1, 1) probability of the critical instance
    h_q: Tensor               # (1, D) raw critical feature
    h_recal: Tensor           # (n, D) rectified shifted features
    tokens: Tensor            # (n+1, D) class token + positional output
    attention: np.ndarray     # (heads, 1, n+1) weights (detached)
    z: Tensor                 # (1, D) bag feature
    bag_logit: Tensor         # (1, 1)
    bag_prob: Tensor          # (1, 1)
    mask: np.ndarray          # (n,) validity of instance rows


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def select_max_instance(h: Tensor, mask: np.ndarray,
                        params: ModelParams) -> Tuple[np.ndarray, int, Tensor, Tensor]:
    """Instance probabilities and the critical (top-scoring) instance.

    Returns (scores, max_index, h_q, a_max) where h_q is the raw feature
    row of the winner and a_max its probability. Ties break to the lowest
    index; masked rows can never win.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise MaskError("empty bag: no unmasked instances")
    probs = ad.sigmoid(_linear(h, params.scorer_w, params.scorer_b))  # (n, 1)
    flat = probs.data[:, 0]
    ranked = np.where(mask, flat, -np.inf)
    max_index = int(np.argmax(ranked))  # argmax returns the first maximum
    h_q = ad.take_rows(h, [max_index])
    a_max = ad.take_rows(probs, [max_index])
    return flat.copy(), max_index, h_q, a_max


def recalibrate(h: Tensor, h_q: Tensor, mask: np.ndarray) -> Tensor:
    """ReLU(h - h_q) with the critical feature broadcast over rows.

    Masked (padding) rows are forced to exact zero so they cannot leak
    into norms or the positional grid.
    """
    mask = np.asarray(mask, dtype=bool)
    out = ad.relu(ad.sub(h, h_q))
    if mask.all():
        return out
    keep = np.repeat(mask[:, None], h.shape[1], axis=1).astype(h.dtype)
    return ad.mul(out, Tensor(keep))


def pem_forward(h_recal: Tensor, mask: np.ndarray, params: ModelParams,
                training: bool = False,
                rng: Optional[np.random.Generator] = None,
                dropout: float = 0.0,
                residual: bool = True) -> Tensor:
    """Positional encoding over the real instances, class token prepended.

    The n real rows are zero-padded up to a ceil(sqrt(n))-square grid laid
    out row-major with features as channels, filtered depthwise 3x3 with a
    ring of zero padding (optionally plus an identity residual), flattened
    back, and cut to the first n rows. Padding rows of the input stay
    zero. Output is (n_rows + 1, D) with the class token at row 0.
    """
    mask = np.asarray(mask, dtype=bool)
    n_rows = h_recal.shape[0]
    real = np.flatnonzero(mask)
    n = len(real)
    if n == 0:
        raise MaskError("empty bag: no unmasked instances")
    d = params.dim
    g = math.isqrt(n)
    if g * g < n:
        g += 1
    rows = ad.take_rows(h_recal, real)
    if g * g > n:
        pad = Tensor(np.zeros((g * g - n, d), dtype=h_recal.dtype))
        rows = ad.concat_rows([rows, pad])
    grid = ad.reshape(ad.transpose2d(rows), (1, d, g, g))
    conv = ad.depthwise_conv2d_3x3(grid, params.conv_w, params.conv_b)
    if residual:
        conv = ad.add(conv, grid)
    flat = ad.transpose2d(ad.reshape(conv, (d, g * g)))
    restored = ad.take_rows(flat, np.arange(n))
    if n < n_rows:
        # route each original row either to its restored value or to a
        # shared zero row, keeping padding rows exactly zero
        zero_row = Tensor(np.zeros((1, d), dtype=h_recal.dtype))
        stacked = ad.concat_rows([restored, zero_row])
        route = np.full(n_rows, n, dtype=np.intp)
        route[real] = np.arange(n)
        restored = ad.take_rows(stacked, route)
    tokens = ad.concat_rows([params.class_token, restored])
    if training and dropout > 0.0:
        tokens = ad.dropout(tokens, dropout, training=True, rng=rng)
    return tokens


def pmsa_forward(h_q: Tensor, tokens: Tensor, token_mask: np.ndarray,
                 params: ModelParams, training: bool = False,
                 rng: Optional[np.random.Generator] = None,
                 dropout: float = 0.0) -> Tuple[Tensor, np.ndarray]:
    """Attention pooling: critical instance as query, tokens as keys/values.

    Per head of width D/heads: softmax(Q K^T / sqrt(D/heads)) V with masked
    softmax. Heads are re-joined, a residual adds the projected query, and
    the output passes a rectified feed-forward with layer norm:
    z = LN(phi_hat + ReLU(f_o(phi_hat))).
    """
    token_mask = np.asarray(token_mask, dtype=bool)
    if not token_mask.any():
        raise MaskError("attention over zero unmasked tokens")
    q = _linear(h_q, params.q_w, params.q_b)          # (1, D)
    k = _linear(tokens, params.k_w, params.k_b)       # (n+1, D)
    v = _linear(tokens, params.v_w, params.v_b)
    dh = params.head_dim
    pooled = []
    weights = []
    for head in range(params.heads):
        lo, hi = head * dh, (head + 1) * dh
        qi = ad.slice_cols(q, lo, hi)
        ki = ad.slice_cols(k, lo, hi)
        vi = ad.slice_cols(v, lo, hi)
        logits = ad.scale(ad.matmul(qi, ad.transpose2d(ki)), 1.0 / math.sqrt(dh))
        attn = ad.softmax_lastdim(logits, mask=token_mask)  # (1, n+1)
        pooled.append(ad.matmul(attn, vi))
        weights.append(attn.data.copy())
    phi = ad.concat_cols(pooled)                      # (1, D)
    phi_hat = ad.add(phi, q)
    ff_in = ad.dropout(phi_hat, dropout, training=training, rng=rng) \
        if training and dropout > 0.0 else phi_hat
    ff = ad.relu(_linear(ff_in, params.o_w, params.o_b))
    z = ad.layer_norm(ad.add(phi_hat, ff), params.ln_gain, params.ln_bias)
    return z, np.stack(weights)


def bag_forward(bag: InstanceBag, params: ModelParams,
                training: bool = False,
                rng: Optional[np.random.Generator] = None,
                dropout: float = 0.0,
                pem_residual: bool = True) -> ForwardTrace:
    """Full forward pass over one bag, in the parameters' precision."""
    h = Tensor(np.asarray(bag.features, dtype=params.scorer_w.dtype))
    mask = bag.mask
    scores, max_index, h_q, a_max = select_max_instance(h, mask, params)
    h_recal = recalibrate(h, h_q, mask)
    tokens = pem_forward(h_recal, mask, params, training=training, rng=rng,
                         dropout=dropout, residual=pem_residual)
    token_mask = np.concatenate([[True], mask])
    z, attention = pmsa_forward(h_q, tokens, token_mask, params,
                                training=training, rng=rng, dropout=dropout)
    bag_logit = _linear(z, params.clf_w, params.clf_b)
    bag_prob = ad.sigmoid(bag_logit)
    return ForwardTrace(scores=scores, max_index=max_index, a_max=a_max,
                        h_q=h_q, h_recal=h_recal, tokens=tokens,
                        attention=attention, z=z, bag_logit=bag_logit,
                        bag_prob=bag_prob, mask=np.asarray(mask, bool).copy())


# ---------------------------------------------------------------------------
# classic pooling comparators


@dataclass
class ComparatorParams:
    """A single linear scorer; all either pooling needs."""

    kind: str  # "mean_pool" or "max_pool"
    dim: int
    w: Tensor  # (D, 1)
    b: Tensor  # (1,)

    def named(self) -> Dict[str, Tensor]:
        return {"w": self.w, "b": self.b}

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.named().values())


COMPARATOR_KINDS = ("mean_pool", "max_pool")


def init_comparator(kind: str, dim: int, seed: int,
                    dtype=np.float32) -> ComparatorParams:
    if kind not in COMPARATOR_KINDS:
        raise ValueError(f"unknown comparator {kind!r}")
    rng = np.random.default_rng(seed)
    return ComparatorParams(kind=kind, dim=dim,
                            w=_uniform_init(rng, (dim, 1), dim, dtype),
                            b=Tensor(np.zeros(1, dtype=dtype), requires_grad=True))


def comparator_forward(cparams: ComparatorParams, bag: InstanceBag) -> Tensor:
    """Bag probability under mean pooling or max pooling.

    mean_pool: sigmoid of the linear head applied to the mean instance
    feature. max_pool: maximum per-instance sigmoid score. Masked rows
    are excluded from both.
    """
    mask = np.asarray(bag.mask, dtype=bool)
    if not mask.any():
        raise MaskError("empty bag: no unmasked instances")
    h = Tensor(np.asarray(bag.features, dtype=cparams.w.dtype))
    if cparams.kind == "mean_pool":
        mean_feat = ad.masked_reduce("mean", h, mask)
        return ad.sigmoid(_linear(mean_feat, cparams.w, cparams.b))
    probs = ad.sigmoid(_linear(h, cparams.w, cparams.b))  # (n, 1)
    ranked = np.where(mask, probs.data[:, 0], -np.inf)
    return ad.take_rows(probs, [int(np.argmax(ranked))])
