"""Adaptation-gate fusion of token embeddings with an auxiliary feature vector.

For every token embedding ``e`` and projected feature vector ``h`` the layer
computes::

    w   = sigmoid(W_hv . [e; h] + b_v)            scalar gate
    h_m = w * (W_v h) + b_m                        shift vector
    a   = min(beta * |e| / |h_m|, 1)               displacement cap
    out = dropout(layer_norm(e + a * h_m))

Forward and backward passes are written out by hand in float64 so they can be
checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import DimensionError, NumericError, ValidationError

DEFAULT_LN_EPS = 1e-5
DEFAULT_DROPOUT = 0.1


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class FusionParams:
    """Learnable parameters of the fusion layer plus its two hyperparameters.

    ``W_hv`` is the single gate row over the concatenation ``[e; h_v]`` so its
    length is ``d + d_f``. ``b_m`` is shared by every token position.
    """

    W_hv: np.ndarray
    b_v: float
    W_v: np.ndarray
    b_m: np.ndarray
    beta: float
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    ln_eps: float = DEFAULT_LN_EPS

    @property
    def dim(self) -> int:
        return self.W_v.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W_v.shape[1]

    @classmethod
    def init(cls, dim, feature_dim, beta, rng, ln_eps=DEFAULT_LN_EPS):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit gain."""
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        lim_hv = 1.0 / np.sqrt(dim + feature_dim)
        lim_v = 1.0 / np.sqrt(feature_dim)
        return cls(
            W_hv=rng.uniform(-lim_hv, lim_hv, size=dim + feature_dim),
            b_v=0.0,
            W_v=rng.uniform(-lim_v, lim_v, size=(dim, feature_dim)),
            b_m=np.zeros(dim),
            beta=float(beta),
            ln_gain=np.ones(dim),
            ln_bias=np.zeros(dim),
            ln_eps=float(ln_eps),
        )

    def validate(self):
        d, d_f = self.W_v.shape if np.ndim(self.W_v) == 2 else (None, None)
        if d is None:
            raise DimensionError("W_v", "2-d matrix", np.shape(self.W_v), "FusionParams")
        for name, arr, shape in (
            ("W_hv", self.W_hv, (d + d_f,)),
            ("b_m", self.b_m, (d,)),
            ("ln_gain", self.ln_gain, (d,)),
            ("ln_bias", self.ln_bias, (d,)),
        ):
            if np.shape(arr) != shape:
                raise DimensionError(name, shape, np.shape(arr), "FusionParams")
        # beta == 0 is allowed: it switches the shift off entirely.
        if not self.beta >= 0:
            raise ValidationError(f"beta must be non-negative, got {self.beta}")
        if not self.ln_eps > 0:
            raise ValidationError(f"ln_eps must be positive, got {self.ln_eps}")
        for f in fields(self):
            if not np.all(np.isfinite(getattr(self, f.name))):
                raise NumericError(f"FusionParams.{f.name} contains non-finite values")

    def to_flat(self) -> dict:
        """Learnable arrays keyed by name (hyperparameters excluded)."""
        return {
            "W_hv": self.W_hv,
            "b_v": np.asarray(self.b_v, dtype=np.float64),
            "W_v": self.W_v,
            "b_m": self.b_m,
            "ln_gain": self.ln_gain,
            "ln_bias": self.ln_bias,
        }

    def with_flat(self, flat: dict) -> "FusionParams":
        return FusionParams(
            W_hv=np.asarray(flat["W_hv"], dtype=np.float64),
            b_v=float(flat["b_v"]),
            W_v=np.asarray(flat["W_v"], dtype=np.float64),
            b_m=np.asarray(flat["b_m"], dtype=np.float64),
            beta=self.beta,
            ln_gain=np.asarray(flat["ln_gain"], dtype=np.float64),
            ln_bias=np.asarray(flat["ln_bias"], dtype=np.float64),
            ln_eps=self.ln_eps,
        )


@dataclass(frozen=True)
class FusionCache:
    """Intermediate values of one forward pass, needed by the backward pass."""

    e: np.ndarray
    h_v: np.ndarray          # per-token rows, (N, d_f)
    feature_rows: bool       # h_v was given per token rather than as one vector
    proj: np.ndarray         # W_v h_v per token, (N, d)
    gate: np.ndarray         # (N,)
    shift: np.ndarray        # (N, d)
    alpha: np.ndarray        # (N,)
    clamped: np.ndarray      # (N,) bool
    mixed: np.ndarray        # e + alpha * shift, before layer norm
    ln_mean: np.ndarray
    ln_var: np.ndarray
    normed: np.ndarray       # (mixed - mean) / sqrt(var + eps)
    dropout_rate: float
    rng_seed: int
    training: bool


@dataclass(frozen=True)
class FusionGradients:
    d_W_hv: np.ndarray
    d_b_v: float
    d_W_v: np.ndarray
    d_b_m: np.ndarray
    d_ln_gain: np.ndarray
    d_ln_bias: np.ndarray
    d_embeddings: np.ndarray
    d_features: np.ndarray

    def param_flat(self) -> dict:
        return {
            "W_hv": self.d_W_hv,
            "b_v": np.asarray(self.d_b_v),
            "W_v": self.d_W_v,
            "b_m": self.d_b_m,
            "ln_gain": self.d_ln_gain,
            "ln_bias": self.d_ln_bias,
        }


def dropout_mask(shape, rate, seed):
    """Inverted-dropout multiplier: 0 for dropped entries, 1/(1-rate) for kept ones."""
    if rate == 0:
        return np.ones(shape)
    keep = np.random.default_rng(seed).random(shape) >= rate
    return keep / (1.0 - rate)


def _check_inputs(e, h_v, params):
    e = np.asarray(e, dtype=np.float64)
    h_v = np.asarray(h_v, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 1 or e.shape[1] < 1:
        raise DimensionError("embeddings", "(N>=1, d>=1) matrix", e.shape, "fusion_forward")
    params.validate()
    n, d = e.shape
    if d != params.dim:
        raise DimensionError("d", params.dim, d, "fusion_forward embeddings")
    if h_v.ndim == 1:
        if h_v.shape[0] != params.feature_dim:
            raise DimensionError("d_f", params.feature_dim, h_v.shape[0], "fusion_forward features")
    elif h_v.ndim == 2:
        if h_v.shape != (n, params.feature_dim):
            raise DimensionError("features", (n, params.feature_dim), h_v.shape, "fusion_forward")
    else:
        raise DimensionError("features", "vector or per-token matrix", h_v.shape, "fusion_forward")
    if not np.all(np.isfinite(e)):
        raise NumericError("embeddings contain non-finite values")
    if not np.all(np.isfinite(h_v)):
        raise NumericError("feature vector contains non-finite values")
    return e, h_v


def fusion_forward(e, h_v, params: FusionParams, dropout_rate=DEFAULT_DROPOUT,
                   rng_seed=0, training=False):
    """Fuse ``h_v`` into every row of ``e``.

    Args:
        e: (N, d) token embeddings.
        h_v: (d_f,) projected feature vector, repeated at every token. A (N, d_f)
            matrix is also accepted so that several texts can be packed into one
            call; each row is then the feature vector of the text owning that token.
        params: layer parameters.
        dropout_rate: inverted-dropout rate, used only when ``training``.
        rng_seed: seed of the dropout mask.
        training: apply dropout.

    Returns:
        ``(fused, cache)`` with ``fused`` of shape (N, d).
    """
    e, h_v = _check_inputs(e, h_v, params)
    if not 0 <= dropout_rate < 1:
        raise ValidationError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
    n, d = e.shape
    feature_rows = h_v.ndim == 2
    hv = h_v if feature_rows else np.broadcast_to(h_v, (n, h_v.shape[0]))

    pre = np.concatenate([e, hv], axis=1) @ params.W_hv + params.b_v
    gate = sigmoid(pre)
    proj = hv @ params.W_v.T
    shift = gate[:, None] * proj + params.b_m

    e_norm = np.linalg.norm(e, axis=1)
    s_norm = np.linalg.norm(shift, axis=1)
    alpha = np.ones(n)
    clamped = np.ones(n, dtype=bool)
    nz = s_norm > 0
    ratio = params.beta * e_norm[nz] / s_norm[nz]
    alpha[nz] = np.minimum(ratio, 1.0)
    clamped[nz] = ratio >= 1.0

    mixed = e + alpha[:, None] * shift
    mean = mixed.mean(axis=1)
    var = ((mixed - mean[:, None]) ** 2).mean(axis=1)
    normed = (mixed - mean[:, None]) / np.sqrt(var + params.ln_eps)[:, None]
    out = normed * params.ln_gain + params.ln_bias
    if training and dropout_rate > 0:
        out = out * dropout_mask(out.shape, dropout_rate, rng_seed)

    cache = FusionCache(
        e=e, h_v=np.array(hv), feature_rows=feature_rows, proj=proj, gate=gate,
        shift=shift, alpha=alpha, clamped=clamped, mixed=mixed, ln_mean=mean,
        ln_var=var, normed=normed, dropout_rate=float(dropout_rate),
        rng_seed=int(rng_seed), training=bool(training),
    )
    return out, cache


def fusion_backward(cache: FusionCache, e, h_v, params: FusionParams, upstream) -> FusionGradients:
    """Gradients of ``sum(upstream * fused)`` for the pass recorded in ``cache``.

    Clamped tokens treat the cap as the constant 1; unclamped tokens propagate
    through both norms in the cap. When ``h_v`` was a single vector its gradient
    is summed over token positions, otherwise one row per token is returned.
    """
    e, h_v = _check_inputs(e, h_v, params)
    upstream = np.asarray(upstream, dtype=np.float64)
    n, d = e.shape
    if cache.e.shape != e.shape or not np.array_equal(cache.e, e):
        raise ValidationError("fusion cache does not belong to these embeddings")
    hv = h_v if h_v.ndim == 2 else np.broadcast_to(h_v, (n, h_v.shape[0]))
    if (h_v.ndim == 2) != cache.feature_rows or not np.array_equal(cache.h_v, hv):
        raise ValidationError("fusion cache does not belong to this feature vector")
    if upstream.shape != (n, d):
        raise DimensionError("upstream", (n, d), upstream.shape, "fusion_backward")

    g = upstream
    if cache.training and cache.dropout_rate > 0:
        g = g * dropout_mask(g.shape, cache.dropout_rate, cache.rng_seed)

    d_ln_gain = (g * cache.normed).sum(axis=0)
    d_ln_bias = g.sum(axis=0)
    g_hat = g * params.ln_gain
    inv_std = 1.0 / np.sqrt(cache.ln_var + params.ln_eps)
    d_mixed = inv_std[:, None] * (
        g_hat
        - g_hat.mean(axis=1, keepdims=True)
        - cache.normed * (g_hat * cache.normed).mean(axis=1, keepdims=True)
    )

    alpha = cache.alpha
    shift = cache.shift
    d_e = d_mixed.copy()
    d_shift = alpha[:, None] * d_mixed
    free = ~cache.clamped
    if np.any(free):
        d_alpha = (d_mixed[free] * shift[free]).sum(axis=1)
        e_f = e[free]
        e_norm = np.linalg.norm(e_f, axis=1)
        s_sq = (shift[free] ** 2).sum(axis=1)
        s_norm = np.sqrt(s_sq)
        safe = e_norm > 0
        coef_e = np.zeros_like(e_norm)
        coef_e[safe] = params.beta / (e_norm[safe] * s_norm[safe])
        d_e[free] += (d_alpha * coef_e)[:, None] * e_f
        d_shift[free] -= (d_alpha * alpha[free] / s_sq)[:, None] * shift[free]

    d_b_m = d_shift.sum(axis=0)
    d_gate = (d_shift * cache.proj).sum(axis=1)
    d_proj = cache.gate[:, None] * d_shift
    d_pre = d_gate * cache.gate * (1.0 - cache.gate)

    d_W_hv = d_pre @ np.concatenate([e, hv], axis=1)
    d_b_v = float(d_pre.sum())
    d_e += d_pre[:, None] * params.W_hv[:d]
    d_hv = d_pre[:, None] * params.W_hv[d:] + d_proj @ params.W_v
    d_W_v = d_proj.T @ hv

    d_features = d_hv if h_v.ndim == 2 else d_hv.sum(axis=0)
    return FusionGradients(
        d_W_hv=d_W_hv, d_b_v=d_b_v, d_W_v=d_W_v, d_b_m=d_b_m,
        d_ln_gain=d_ln_gain, d_ln_bias=d_ln_bias,
        d_embeddings=d_e, d_features=d_features,
    )
