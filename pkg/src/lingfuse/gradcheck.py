"""Central finite-difference checks of the hand-written gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .fusion import FusionParams, fusion_backward, fusion_forward
from .model import (
    Batch,
    ModelDims,
    SmoothingConfig,
    ToyModelParams,
    backward_batch,
    forward_batch,
    one_hot,
    smoothed_cross_entropy,
)


@dataclass(frozen=True)
class GradCheckReport:
    op_id: str
    max_rel_error: float
    passed: bool
    n_coords: int

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op_id}: max relative error {self.max_rel_error:.3e} over {self.n_coords} coordinates"


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


def central_difference(fn, x, step, cotangent=None) -> np.ndarray:
    """Numerical gradient of scalar ``fn`` at array ``x`` (x is not modified).

    With ``cotangent`` given, ``fn`` returns an array and the gradient of
    ``sum(cotangent * fn(x))`` is estimated. The outputs are differenced
    elementwise before contracting, which keeps the rounding error at the scale
    of individual outputs instead of their sum.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        if cotangent is None:
            g[i] = (up - down) / (2.0 * step)
        else:
            g[i] = float((cotangent * (up - down)).sum()) / (2.0 * step)
    return grad


def _compare(analytic: dict, objective, point: dict, step, cotangent=None):
    """Max relative error between ``analytic`` and finite differences over ``point``."""
    worst, count = 0.0, 0
    for name in point:
        def fn(x, name=name):
            return objective({**point, name: x})
        numeric = central_difference(fn, point[name], step, cotangent)
        err = relative_error(analytic[name], numeric)
        count += err.size
        if err.size:
            worst = max(worst, float(err.max()))
    return worst, count


# --------------------------------------------------------------------------
# instances
# --------------------------------------------------------------------------

def make_fusion_instance(seed, n=5, d=4, d_f=3, clamped=False, dropout_rate=0.1):
    """Random fusion problem with every token kept off the cap kink.

    With ``clamped=False`` all cap ratios are at most 0.5; with ``clamped=True``
    they are all at least 2. Gate pre-activations stay inside (-4, 4).
    """
    rng = np.random.default_rng(seed)
    while True:
        e = rng.normal(size=(n, d))
        h_v = rng.normal(size=d_f)
        params = FusionParams(
            W_hv=rng.normal(scale=0.4, size=d + d_f),
            b_v=float(rng.normal(scale=0.3)),
            W_v=rng.normal(size=(d, d_f)),
            b_m=rng.normal(scale=0.5, size=d),
            beta=1.0,
            ln_gain=1.0 + rng.normal(scale=0.2, size=d),
            ln_bias=rng.normal(scale=0.2, size=d),
        )
        pre = np.concatenate([e, np.broadcast_to(h_v, (n, d_f))], axis=1) @ params.W_hv + params.b_v
        _, cache = fusion_forward(e, h_v, params)
        s_norm = np.linalg.norm(cache.shift, axis=1)
        if np.all(np.abs(pre) < 4) and np.all(s_norm > 0.1):
            break
    ratios = np.linalg.norm(e, axis=1) / s_norm
    beta = 2.0 / ratios.min() if clamped else 0.5 / ratios.max()
    params = FusionParams(**{**params.__dict__, "beta": float(beta)})
    upstream = rng.normal(size=(n, d))
    drop_seed = int(rng.integers(2**31))
    return e, h_v, params, upstream, dropout_rate, drop_seed


def check_fusion(seed, step=1e-5, tolerance=1e-5, clamped=False) -> GradCheckReport:
    e, h_v, params, upstream, rate, drop_seed = make_fusion_instance(seed, clamped=clamped)
    _, cache = fusion_forward(e, h_v, params, rate, drop_seed, training=True)
    grads = fusion_backward(cache, e, h_v, params, upstream)
    analytic = {**grads.param_flat(), "e": grads.d_embeddings, "h_v": grads.d_features}
    point = {**params.to_flat(), "e": e, "h_v": h_v}

    def objective(pt):
        p = params.with_flat(pt)
        out, _ = fusion_forward(pt["e"], pt["h_v"], p, rate, drop_seed, training=True)
        return out

    worst, count = _compare(analytic, objective, point, step, cotangent=upstream)
    name = "fusion(clamped)" if clamped else "fusion"
    return GradCheckReport(name, worst, worst < tolerance, count)


def check_smoothed_ce(seed, step=1e-5, tolerance=1e-6, alpha=None, k=None) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    k = int(k if k is not None else rng.integers(2, 6))
    alpha = float(alpha if alpha is not None else rng.choice([0.0, 0.001, 0.1]))
    cfg = SmoothingConfig(alpha, k)
    logits = rng.normal(scale=2.0, size=k)
    y = one_hot(rng.integers(k), k)
    _, grad = smoothed_cross_entropy(logits, y, cfg)
    numeric = central_difference(lambda z: smoothed_cross_entropy(z, y, cfg)[0], logits, step)
    err = relative_error(grad, numeric)
    worst = float(err.max())
    return GradCheckReport(f"smoothed_ce(K={k}, alpha={alpha})", worst, worst < tolerance, err.size)


def check_toy_model(seed, step=1e-5, tolerance=1e-5) -> GradCheckReport:
    """End-to-end check of the toy classifier's backward pass on a tiny instance.

    Instances are redrawn until no token hits the displacement cap and no
    hidden pre-activation sits within 1e-4 of the ReLU kink.
    """
    rng = np.random.default_rng(seed)
    dims = ModelDims(vocab_size=11, embed_dim=4, feature_dim=3, num_classes=3, proj_dim=5, hidden_dim=6)
    cfg = SmoothingConfig(0.1, dims.num_classes)
    for _ in range(1000):
        params = ToyModelParams.init(dims, beta=0.05, seed=int(rng.integers(2**31)))
        id_lists = [rng.integers(1, dims.vocab_size, size=m) for m in (3, 1, 4)]
        batch = Batch.pack(id_lists, rng.normal(size=(3, dims.feature_dim)))
        labels = rng.integers(dims.num_classes, size=3)
        drop_seed = int(rng.integers(2**31))

        def loss_of(p):
            _, cache = forward_batch(p, batch, training=True, seed=drop_seed, dropout_rate=0.1)
            return smoothed_cross_entropy(cache.logits, one_hot(labels, dims.num_classes), cfg)[0], cache

        _, cache = loss_of(params)
        if not np.any(cache.fusion.clamped) and np.all(np.abs(cache.hidden_pre) >= 1e-4):
            break
    else:
        raise ValidationError(f"seed {seed}: no kink-free toy instance found")
    _, d_logits = smoothed_cross_entropy(cache.logits, one_hot(labels, dims.num_classes), cfg)
    analytic = backward_batch(params, batch, cache, d_logits)
    point = params.to_flat()
    worst, count = _compare(analytic, lambda pt: loss_of(params.with_flat(pt))[0], point, step)
    return GradCheckReport("toy_model", worst, worst < tolerance, count)


CHECKS = {
    "fusion": check_fusion,
    "smoothed_ce": check_smoothed_ce,
    "toy_model": check_toy_model,
}


def gradient_check(op_id: str, instance_seed: int = 7, step: float = 1e-5,
                   tolerance: float = 1e-5) -> GradCheckReport:
    """Analytic vs central-difference gradients for one registered operation."""
    try:
        check = CHECKS[op_id]
    except KeyError:
        raise ValidationError(f"unknown op {op_id!r}; choose from {sorted(CHECKS)}") from None
    return check(instance_seed, step=step, tolerance=tolerance)
