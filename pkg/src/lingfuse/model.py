"""Desk-scale text classifier built around the fusion layer.

Hashed token embeddings are fused with a projected feature vector, mean
pooled, and classified by a 128-unit ReLU layer followed by a K-way softmax.
Training uses label-smoothed cross-entropy, Adam and a step learning-rate
schedule. Everything runs in float64 numpy with hand-written gradients.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, ValidationError
from .fusion import DEFAULT_DROPOUT, FusionParams, fusion_backward, fusion_forward
from .text import token_ids

PROJ_DIM = 128
HIDDEN_DIM = 128
PARAMS_FORMAT_VERSION = 1

SELECTION_MODES = ("best-val-loss-checkpoint", "early-stopping", "last-epoch")


# --------------------------------------------------------------------------
# label smoothing
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SmoothingConfig:
    alpha_smooth: float = 0.0
    num_classes: int = 2

    def __post_init__(self):
        if not 0 <= self.alpha_smooth < 1:
            raise ValidationError(f"alpha_smooth must lie in [0, 1), got {self.alpha_smooth}")
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")


def _check_one_hot(y, k):
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != k:
        raise DimensionError("K", k, y.shape[-1], "one-hot target")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
        raise ValidationError("target is not one-hot")
    return y


def smooth_targets(y, cfg: SmoothingConfig) -> np.ndarray:
    """``y * (1 - alpha) + alpha / K`` for a one-hot ``y`` (or a stack of them)."""
    y = _check_one_hot(y, cfg.num_classes)
    return y * (1.0 - cfg.alpha_smooth) + cfg.alpha_smooth / cfg.num_classes


def one_hot(labels, k) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (k,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def smoothed_cross_entropy(logits, y, cfg: SmoothingConfig):
    """Smoothed cross-entropy of ``softmax(logits)`` against one-hot ``y``.

    Works on one sample (K,) or a batch (B, K); for a batch the loss and the
    gradient are averaged over rows.

    Returns:
        ``(loss, d_logits)`` where ``d_logits = (p - y_smooth) / B``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("logits contain non-finite values")
    target = smooth_targets(y, cfg)
    if target.shape != logits.shape:
        raise DimensionError("logits", target.shape, logits.shape, "smoothed_cross_entropy")
    logp = log_softmax(logits)
    per_row = -(target * logp).sum(axis=-1)
    grad = np.exp(logp) - target
    if logits.ndim == 1:
        return float(per_row), grad
    b = logits.shape[0]
    return float(per_row.mean()), grad / b


def smoothed_cross_entropy_probs(p, y, cfg: SmoothingConfig):
    """Same loss evaluated from probabilities on the simplex.

    ``log p`` is taken directly, so this goes through the logit path with
    ``logits = log p`` (softmax of which is ``p`` again).
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise ValidationError("probabilities must be non-negative and sum to 1")
    target = smooth_targets(y, cfg)
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    terms = np.zeros_like(target)
    np.multiply(-target, logp, out=terms, where=target > 0)
    return float(terms.sum(axis=-1)) if p.ndim == 1 else float(terms.sum(axis=-1).mean())


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelDims:
    vocab_size: int = 4096
    embed_dim: int = 32
    feature_dim: int = 8
    num_classes: int = 2
    proj_dim: int = PROJ_DIM
    hidden_dim: int = HIDDEN_DIM

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValidationError("vocab_size must be >= 2")
        if min(self.embed_dim, self.feature_dim, self.proj_dim, self.hidden_dim) < 1:
            raise ValidationError(f"all model dimensions must be positive: {self}")
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")


def _uniform(rng, fan_out, fan_in):
    lim = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-lim, lim, size=(fan_out, fan_in))


@dataclass(frozen=True)
class ToyModelParams:
    embed_table: np.ndarray    # (V, d)
    fusion: FusionParams
    proj_W: np.ndarray         # (128, d_f_raw)
    proj_b: np.ndarray
    hidden_W: np.ndarray       # (128, d)
    hidden_b: np.ndarray
    out_W: np.ndarray          # (K, 128)
    out_b: np.ndarray
    dims: ModelDims

    @classmethod
    def init(cls, dims: ModelDims, beta: float, seed: int = 0) -> "ToyModelParams":
        rng = np.random.default_rng(seed)
        # embeddings have no fan-in; unit-range uniform keeps token norms O(sqrt(d))
        table = rng.uniform(-1.0, 1.0, size=(dims.vocab_size, dims.embed_dim))
        fusion = FusionParams.init(dims.embed_dim, dims.proj_dim, beta, rng)
        return cls(
            embed_table=table,
            fusion=fusion,
            proj_W=_uniform(rng, dims.proj_dim, dims.feature_dim),
            proj_b=np.zeros(dims.proj_dim),
            hidden_W=_uniform(rng, dims.hidden_dim, dims.embed_dim),
            hidden_b=np.zeros(dims.hidden_dim),
            out_W=_uniform(rng, dims.num_classes, dims.hidden_dim),
            out_b=np.zeros(dims.num_classes),
            dims=dims,
        )

    def to_flat(self) -> dict:
        flat = {"embed_table": self.embed_table}
        flat.update({f"fusion.{k}": v for k, v in self.fusion.to_flat().items()})
        flat.update(
            proj_W=self.proj_W, proj_b=self.proj_b,
            hidden_W=self.hidden_W, hidden_b=self.hidden_b,
            out_W=self.out_W, out_b=self.out_b,
        )
        return flat

    def with_flat(self, flat: dict) -> "ToyModelParams":
        fusion = self.fusion.with_flat(
            {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith("fusion.")}
        )
        return ToyModelParams(
            embed_table=flat["embed_table"], fusion=fusion,
            proj_W=flat["proj_W"], proj_b=flat["proj_b"],
            hidden_W=flat["hidden_W"], hidden_b=flat["hidden_b"],
            out_W=flat["out_W"], out_b=flat["out_b"],
            dims=self.dims,
        )

    def validate(self):
        dm = self.dims
        expected = {
            "embed_table": (dm.vocab_size, dm.embed_dim),
            "proj_W": (dm.proj_dim, dm.feature_dim),
            "proj_b": (dm.proj_dim,),
            "hidden_W": (dm.hidden_dim, dm.embed_dim),
            "hidden_b": (dm.hidden_dim,),
            "out_W": (dm.num_classes, dm.hidden_dim),
            "out_b": (dm.num_classes,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DimensionError(name, shape, arr.shape, "ToyModelParams")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"ToyModelParams.{name} contains non-finite values")
        if (self.fusion.dim, self.fusion.feature_dim) != (dm.embed_dim, dm.proj_dim):
            raise DimensionError("fusion", (dm.embed_dim, dm.proj_dim),
                                 (self.fusion.dim, self.fusion.feature_dim), "ToyModelParams")
        self.fusion.validate()


def save_params(params: ToyModelParams, path):
    header = {
        "format": "lingfuse-toy-model",
        "version": PARAMS_FORMAT_VERSION,
        "dims": asdict(params.dims),
        "beta": params.fusion.beta,
        "ln_eps": params.fusion.ln_eps,
    }
    arrays = {k.replace(".", "__"): np.asarray(v) for k, v in params.to_flat().items()}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_params(path) -> ToyModelParams:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != "lingfuse-toy-model":
            raise ValidationError(f"{path}: not a toy model file")
        if header.get("version") != PARAMS_FORMAT_VERSION:
            raise ValidationError(f"{path}: unsupported format version {header.get('version')}")
        flat = {k.replace("__", "."): data[k] for k in data.files if k != "header"}
    fusion = FusionParams(
        W_hv=flat["fusion.W_hv"], b_v=float(flat["fusion.b_v"]), W_v=flat["fusion.W_v"],
        b_m=flat["fusion.b_m"], beta=header["beta"], ln_gain=flat["fusion.ln_gain"],
        ln_bias=flat["fusion.ln_bias"], ln_eps=header["ln_eps"],
    )
    params = ToyModelParams(
        embed_table=flat["embed_table"], fusion=fusion,
        proj_W=flat["proj_W"], proj_b=flat["proj_b"],
        hidden_W=flat["hidden_W"], hidden_b=flat["hidden_b"],
        out_W=flat["out_W"], out_b=flat["out_b"],
        dims=ModelDims(**header["dims"]),
    )
    params.validate()
    return params


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Batch:
    """Several texts packed into one token matrix."""

    ids: np.ndarray        # (T,) token bucket ids, texts back to back
    owner: np.ndarray      # (T,) index of the text each token belongs to
    starts: np.ndarray     # (B,) offset of each text in ``ids``
    lengths: np.ndarray    # (B,)
    features: np.ndarray   # (B, d_f_raw)

    @classmethod
    def pack(cls, id_lists, features):
        lengths = np.array([len(ids) for ids in id_lists], dtype=np.int64)
        if np.any(lengths < 1):
            raise ValidationError("every text needs at least one token id")
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
        return cls(
            ids=np.concatenate(id_lists).astype(np.int64),
            owner=np.repeat(np.arange(len(id_lists)), lengths),
            starts=starts,
            lengths=lengths,
            features=np.atleast_2d(np.asarray(features, dtype=np.float64)),
        )


@dataclass(frozen=True)
class ToyCache:
    embeddings: np.ndarray
    hv: np.ndarray
    fusion: object
    pooled: np.ndarray
    hidden_pre: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray


def forward_batch(params: ToyModelParams, batch: Batch, training=False, seed=0,
                  dropout_rate=DEFAULT_DROPOUT):
    """Returns ``(probs, cache)`` with ``probs`` of shape (B, K)."""
    dm = params.dims
    if batch.features.shape != (len(batch.lengths), dm.feature_dim):
        raise DimensionError("features", (len(batch.lengths), dm.feature_dim),
                             batch.features.shape, "forward_batch")
    if batch.ids.min() < 0 or batch.ids.max() >= dm.vocab_size:
        raise DimensionError("token id", f"[0, {dm.vocab_size})",
                             (int(batch.ids.min()), int(batch.ids.max())), "forward_batch")
    emb = params.embed_table[batch.ids]
    proj = batch.features @ params.proj_W.T + params.proj_b
    hv = proj[batch.owner]
    fused, fcache = fusion_forward(emb, hv, params.fusion, dropout_rate, seed, training)
    pooled = np.add.reduceat(fused, batch.starts, axis=0) / batch.lengths[:, None]
    hidden_pre = pooled @ params.hidden_W.T + params.hidden_b
    hidden = np.maximum(hidden_pre, 0.0)
    logits = hidden @ params.out_W.T + params.out_b
    cache = ToyCache(emb, hv, fcache, pooled, hidden_pre, hidden, logits)
    return softmax(logits), cache


def backward_batch(params: ToyModelParams, batch: Batch, cache: ToyCache, d_logits) -> dict:
    """Gradients of ``sum(d_logits * logits)``, keyed like ``params.to_flat()``."""
    grads = {
        "out_W": d_logits.T @ cache.hidden,
        "out_b": d_logits.sum(axis=0),
    }
    d_hidden_pre = (d_logits @ params.out_W) * (cache.hidden_pre > 0)
    grads["hidden_W"] = d_hidden_pre.T @ cache.pooled
    grads["hidden_b"] = d_hidden_pre.sum(axis=0)
    d_pooled = d_hidden_pre @ params.hidden_W
    d_fused = (d_pooled / batch.lengths[:, None])[batch.owner]

    fg = fusion_backward(cache.fusion, cache.embeddings, cache.hv, params.fusion, d_fused)
    grads.update({f"fusion.{k}": v for k, v in fg.param_flat().items()})
    d_proj = np.add.reduceat(fg.d_features, batch.starts, axis=0)
    grads["proj_W"] = d_proj.T @ batch.features
    grads["proj_b"] = d_proj.sum(axis=0)
    d_table = np.zeros_like(params.embed_table)
    np.add.at(d_table, batch.ids, fg.d_embeddings)
    grads["embed_table"] = d_table
    return grads


def toy_forward(text_tokens, feature_raw, params: ToyModelParams, training=False, seed=0,
                dropout_rate=DEFAULT_DROPOUT):
    """Class probabilities for one text (a string or a token list)."""
    ids = token_ids(text_tokens, params.dims.vocab_size)
    batch = Batch.pack([ids], np.asarray(feature_raw, dtype=np.float64)[None, :])
    probs, cache = forward_batch(params, batch, training, seed, dropout_rate)
    return probs[0], cache


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    step_size: int = 5
    gamma: float = 0.1
    batch_size: int = 8
    max_epochs: int = 30
    patience: int = 7
    selection_mode: str = "best-val-loss-checkpoint"
    seed: int = 0
    dropout_rate: float = DEFAULT_DROPOUT

    def __post_init__(self):
        for name in ("learning_rate", "step_size", "gamma", "batch_size", "max_epochs", "patience"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"TrainConfig.{name} must be positive")
        if self.selection_mode not in SELECTION_MODES:
            raise ValidationError(f"unknown selection_mode {self.selection_mode!r}")
        if not 0 <= self.dropout_rate < 1:
            raise ValidationError("dropout_rate must lie in [0, 1)")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule, ``epoch`` counted from 1."""
    return cfg.learning_rate * cfg.gamma ** ((epoch - 1) // cfg.step_size)


def select_epoch(val_losses) -> int:
    """1-indexed epoch of the smallest validation loss, earliest on ties."""
    if len(val_losses) == 0:
        raise ValidationError("no validation losses recorded")
    return int(np.argmin(np.asarray(val_losses))) + 1


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    scratch: dict = field(default_factory=dict)


def adam_init(flat: dict) -> AdamState:
    return AdamState({k: np.zeros_like(v) for k, v in flat.items()},
                     {k: np.zeros_like(v) for k, v in flat.items()},
                     scratch={k: np.empty_like(v) for k, v in flat.items()})


def adam_step(flat: dict, grads: dict, state: AdamState, lr: float,
              b1=0.9, b2=0.999, eps=1e-8):
    """One Adam update, applied in place to ``flat`` and ``state``.

    Callers own both; :func:`train` works on private copies.
    """
    state.t += 1
    step = lr / (1.0 - b1 ** state.t)
    inv_c2 = 1.0 / np.sqrt(1.0 - b2 ** state.t)
    for k, p in flat.items():
        g = grads[k]
        m, v, buf = state.m[k], state.v[k], state.scratch[k]
        m *= b1
        np.multiply(g, 1.0 - b1, out=buf)
        m += buf
        v *= b2
        np.multiply(g, g, out=buf)
        buf *= 1.0 - b2
        v += buf
        np.sqrt(v, out=buf)
        buf *= inv_c2
        buf += eps
        np.divide(m, buf, out=buf)
        buf *= step
        p -= buf


@dataclass(frozen=True)
class EncodedSet:
    ids: list
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.ids)

    def batch(self, idx) -> Batch:
        return Batch.pack([self.ids[i] for i in idx], self.features[idx])

    def subset(self, idx) -> "EncodedSet":
        idx = np.asarray(idx, dtype=np.int64)
        return EncodedSet([self.ids[i] for i in idx], self.features[idx], self.labels[idx])


def encode(texts, features, labels, vocab_size) -> EncodedSet:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] != len(texts) or labels.shape != (len(texts),):
        raise DimensionError("rows", len(texts), (features.shape, labels.shape), "encode")
    return EncodedSet([token_ids(t, vocab_size) for t in texts], features, labels)


def predict_proba(params: ToyModelParams, data: EncodedSet, batch_size=64) -> np.ndarray:
    out = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        probs, _ = forward_batch(params, data.batch(idx), training=False)
        out.append(probs)
    return np.concatenate(out) if out else np.zeros((0, params.dims.num_classes))


def evaluate_loss(params: ToyModelParams, data: EncodedSet, smoothing: SmoothingConfig,
                  batch_size=64) -> float:
    total = 0.0
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        _, cache = forward_batch(params, data.batch(idx), training=False)
        loss, _ = smoothed_cross_entropy(cache.logits, one_hot(data.labels[idx], smoothing.num_classes),
                                         smoothing)
        total += loss * len(idx)
    return total / len(data)


@dataclass
class TrainResult:
    params: ToyModelParams
    history: list = field(default_factory=list)
    selected_epoch: int = 0


def _dropout_seed(seed, epoch, step):
    return int(np.random.SeedSequence([seed, epoch, step]).generate_state(1)[0])


def train(train_set: EncodedSet, val_set: EncodedSet, cfg: TrainConfig,
          smoothing: SmoothingConfig, dims: ModelDims, beta: float,
          params: ToyModelParams | None = None) -> TrainResult:
    """Mini-batch Adam training with per-epoch validation.

    ``selection_mode`` decides which parameters come back: the epoch with the
    smallest validation loss (checkpoint), the same but stopping once
    ``patience`` epochs pass without improvement (early-stopping), or simply
    the final epoch (last-epoch).
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValidationError("train and validation splits must both be non-empty")
    if dims.num_classes != smoothing.num_classes:
        raise ValidationError("model and smoothing disagree on the number of classes")
    if params is None:
        params = ToyModelParams.init(dims, beta, seed=cfg.seed)
    params.validate()

    rng = np.random.default_rng(cfg.seed)
    flat = {k: np.array(v, dtype=np.float64) for k, v in params.to_flat().items()}
    params = params.with_flat(flat)
    state = adam_init(flat)
    history = []
    best_loss, best_epoch, best_params = np.inf, 0, params
    n = len(train_set)

    for epoch in range(1, cfg.max_epochs + 1):
        lr = lr_at_epoch(cfg, epoch)
        order = rng.permutation(n)
        total = 0.0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch = train_set.batch(idx)
            _, cache = forward_batch(params, batch, training=True,
                                     seed=_dropout_seed(cfg.seed, epoch, step),
                                     dropout_rate=cfg.dropout_rate)
            loss, d_logits = smoothed_cross_entropy(
                cache.logits, one_hot(train_set.labels[idx], smoothing.num_classes), smoothing)
            grads = backward_batch(params, batch, cache, d_logits)
            adam_step(flat, grads, state, lr)
            # b_v is stored as a python float, so rebuild the view after each step
            params = params.with_flat(flat)
            total += loss * len(idx)
        if not np.isfinite(total):
            raise NumericError(f"training loss became non-finite at epoch {epoch}")
        val_loss = evaluate_loss(params, val_set, smoothing)
        history.append({"epoch": epoch, "lr": lr, "train_loss": total / n, "val_loss": val_loss})
        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_params = params.with_flat({k: v.copy() for k, v in flat.items()})
        if cfg.selection_mode == "early-stopping" and epoch - best_epoch >= cfg.patience:
            break

    if cfg.selection_mode == "last-epoch":
        return TrainResult(params, history, len(history))
    selected = select_epoch([h["val_loss"] for h in history])
    assert selected == best_epoch
    return TrainResult(best_params, history, selected)
