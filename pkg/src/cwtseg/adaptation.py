"""Episode-level adaptation: the binary pixel classifier and the
attention module that rewrites its weights for each query image.

The classifier is a bias-free 2 x d weight matrix (row 0 background,
row 1 foreground) fitted to the support pixels by full-batch SGD. The
weight adapter treats the two classifier rows as attention queries
over the query image's pixel features: per head, A = softmax(Q K^T /
scale), the attended values pass through dropout and a linear map psi,
and the result is added residually to the classifier and layer
normalized. Meta-training updates only the adapter's parameters;
the fitted classifier enters as a constant (no gradient flows back into
the inner loop).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import FeatureMap
from .errors import ConfigError
from .optim import SgdOptimizer
from .tensor import (
    ShapeError,
    Tensor,
    backward,
    concat,
    cross_entropy_smoothed,
    dropout,
    layer_norm,
    make_rng,
    matmul,
    narrow,
    softmax_rows,
)

__all__ = [
    "ClassifierWeights",
    "CWTParams",
    "InnerLoopConfig",
    "init_cwt",
    "init_classifier",
    "fit_classifier_inner",
    "cwt_forward",
    "cwt_forward_support_variant",
    "predict_pixels",
    "query_loss",
    "concat_support_features",
]


@dataclass
class ClassifierWeights:
    """Bias-free binary pixel classifier; row 0 background, row 1 foreground."""

    w: Tensor  # [2, d]

    def __post_init__(self) -> None:
        if self.w.shape[0] != 2 or self.w.ndim != 2:
            raise ShapeError(f"classifier weights must be [2, d], got {self.w.shape}")

    @property
    def feature_dim(self) -> int:
        return self.w.shape[1]


@dataclass
class CWTParams:
    """Attention-based weight adapter parameters.

    shared_qkv reuses one projection for queries, keys, and values.
    scale_mode "per_head" divides attention logits by sqrt(d_a / heads),
    "full" by sqrt(d_a). use_layer_norm can be disabled to expose the
    exact residual identity.
    """

    wq: Tensor               # [d, d_a]
    wk: Tensor               # [d, d_a]
    wv: Tensor               # [d, d_a]
    psi_w: Tensor            # [d_a, d]
    psi_b: Tensor            # [1, d]
    ln_gamma: Tensor         # [d]
    ln_beta: Tensor          # [d]
    num_heads: int
    dropout_rate: float = 0.1
    use_layer_norm: bool = True
    shared_qkv: bool = False
    scale_mode: str = "per_head"

    def __post_init__(self) -> None:
        if self.latent_dim % self.num_heads != 0:
            raise ConfigError(
                f"latent width {self.latent_dim} is not divisible by "
                f"{self.num_heads} heads")
        if self.scale_mode not in ("per_head", "full"):
            raise ConfigError(f"unknown scale_mode {self.scale_mode!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def feature_dim(self) -> int:
        return self.wq.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.wq.shape[1]

    def tensors(self) -> list[Tensor]:
        qkv = [self.wq] if self.shared_qkv else [self.wq, self.wk, self.wv]
        return qkv + [self.psi_w, self.psi_b, self.ln_gamma, self.ln_beta]


def init_cwt(feature_dim: int, latent_dim: int, num_heads: int, seed: int = 0,
             dropout_rate: float = 0.1, use_layer_norm: bool = True,
             shared_qkv: bool = False, scale_mode: str = "per_head",
             psi_sigma: float = 0.01, dtype=np.float64) -> CWTParams:
    """Projections at 1/sqrt(d) scale; psi starts near zero so the module
    opens at (a layer-normalized) residual identity."""
    if latent_dim % num_heads != 0:
        raise ConfigError(
            f"latent width {latent_dim} is not divisible by {num_heads} heads")

    def proj(key: int, rows: int, cols: int, sigma: float) -> Tensor:
        rng = make_rng(seed, 600 + key)
        return Tensor((rng.standard_normal((rows, cols)) * sigma).astype(dtype),
                      requires_grad=True)

    sigma_qkv = 1.0 / np.sqrt(feature_dim)
    wq = proj(0, feature_dim, latent_dim, sigma_qkv)
    wk = wq if shared_qkv else proj(1, feature_dim, latent_dim, sigma_qkv)
    wv = wq if shared_qkv else proj(2, feature_dim, latent_dim, sigma_qkv)
    return CWTParams(
        wq=wq, wk=wk, wv=wv,
        psi_w=proj(3, latent_dim, feature_dim, psi_sigma),
        psi_b=Tensor(np.zeros((1, feature_dim), dtype=dtype), requires_grad=True),
        ln_gamma=Tensor(np.ones(feature_dim, dtype=dtype), requires_grad=True),
        ln_beta=Tensor(np.zeros(feature_dim, dtype=dtype), requires_grad=True),
        num_heads=num_heads, dropout_rate=dropout_rate,
        use_layer_norm=use_layer_norm, shared_qkv=shared_qkv, scale_mode=scale_mode)


@dataclass
class InnerLoopConfig:
    """Support-set classifier fitting."""

    iterations: int = 200
    lr: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0
    init: str = "random_normal"
    init_sigma: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.init not in ("random_normal", "prototype"):
            raise ConfigError(f"unknown classifier init {self.init!r}")


def concat_support_features(support_features: list[FeatureMap]) -> Tensor:
    if not support_features:
        raise ConfigError("support set is empty")
    if len(support_features) == 1:
        return support_features[0].features
    return concat([f.features for f in support_features], axis=0)


def _stacked_labels(support_masks: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(m).reshape(-1) for m in support_masks])


def init_classifier(support_features: list[FeatureMap],
                    support_masks: list[np.ndarray],
                    cfg: InnerLoopConfig,
                    rng: np.random.Generator | None = None,
                    track_gradients: bool = False) -> ClassifierWeights:
    """Starting classifier weights.

    random_normal draws a seeded Gaussian. prototype sets row 1 to the
    mean foreground feature and row 0 to the mean background feature over
    all support pixels; with track_gradients the means stay attached to
    the feature graph (used when the backbone itself is being trained).
    """
    cfg.validate()
    feats = concat_support_features(support_features)
    d = feats.shape[1]
    labels = _stacked_labels(support_masks)
    if labels.shape[0] != feats.shape[0]:
        raise ShapeError(
            f"{feats.shape[0]} support pixels but {labels.shape[0]} mask labels")

    if cfg.init == "random_normal":
        if rng is None:
            rng = make_rng(cfg.seed, 700)
        w = (rng.standard_normal((2, d)) * cfg.init_sigma).astype(feats.dtype)
        return ClassifierWeights(Tensor(w, requires_grad=True))

    fg = labels == 1
    n_fg = int(fg.sum())
    n_bg = int(labels.size - n_fg)
    if n_fg == 0:
        raise ConfigError("prototype init needs at least one foreground support pixel")
    if n_bg == 0:
        raise ConfigError("prototype init needs at least one background support pixel")
    if track_gradients:
        ind = np.zeros((2, labels.size), dtype=feats.dtype)
        ind[0, ~fg] = 1.0 / n_bg
        ind[1, fg] = 1.0 / n_fg
        w = matmul(Tensor(ind), feats)
        return ClassifierWeights(w)
    data = feats.data
    w = np.stack([data[~fg].mean(axis=0), data[fg].mean(axis=0)])
    return ClassifierWeights(Tensor(w, requires_grad=True))


def fit_classifier_inner(w0: ClassifierWeights,
                         support_features: list[FeatureMap],
                         support_masks: list[np.ndarray],
                         cfg: InnerLoopConfig) -> tuple[ClassifierWeights, dict]:
    """Full-batch SGD on the support pixels' cross-entropy (no smoothing).

    The features enter as constants: nothing propagates to the backbone,
    and the adapter's parameters are untouched. Returns fresh weights and
    a run log echoing the configuration.
    """
    cfg.validate()
    feats = Tensor(concat_support_features(support_features).data)
    labels = _stacked_labels(support_masks).astype(np.intp)
    if labels.shape[0] != feats.shape[0]:
        raise ShapeError(
            f"{feats.shape[0]} support pixels but {labels.shape[0]} mask labels")

    w = Tensor(w0.w.data.copy(), requires_grad=True)
    log = {"stage": "inner_loop", "iterations": cfg.iterations, "lr": cfg.lr,
           "momentum": cfg.momentum, "weight_decay": cfg.weight_decay,
           "init": cfg.init, "support_pixels": int(labels.size)}
    if cfg.iterations == 0:
        return ClassifierWeights(w), log
    opt = SgdOptimizer([w], lr=cfg.lr, momentum=cfg.momentum,
                       weight_decay=cfg.weight_decay)
    for _ in range(cfg.iterations):
        logits = matmul(feats, w.t())
        loss = cross_entropy_smoothed(logits, labels, epsilon=0.0)
        backward(loss)
        opt.step()
    log["final_loss"] = loss.item()
    return ClassifierWeights(w), log


def _attend(w: ClassifierWeights, feats: Tensor, params: CWTParams,
            train_mode: bool, rng: np.random.Generator | None) -> ClassifierWeights:
    d = params.feature_dim
    if feats.ndim != 2 or feats.shape[1] != d:
        raise ShapeError(
            f"features {feats.shape} do not match adapter width {d}")
    if w.feature_dim != d:
        raise ShapeError(
            f"classifier width {w.feature_dim} does not match adapter width {d}")

    w_in = w.w.detach()  # the inner loop is not differentiated through
    q = matmul(w_in, params.wq)
    k = matmul(feats, params.wk)
    v = matmul(feats, params.wv)

    head_dim = params.latent_dim // params.num_heads
    scale = np.sqrt(head_dim if params.scale_mode == "per_head" else params.latent_dim)
    heads = []
    for j in range(params.num_heads):
        qj = narrow(q, 1, j * head_dim, head_dim)
        kj = narrow(k, 1, j * head_dim, head_dim)
        vj = narrow(v, 1, j * head_dim, head_dim)
        attn = softmax_rows(matmul(qj, kj.t()) * (1.0 / scale))
        heads.append(matmul(attn, vj))
    attended = heads[0] if len(heads) == 1 else concat(heads, axis=1)

    if train_mode and params.dropout_rate > 0.0 and rng is None:
        raise ConfigError("train-mode adaptation with dropout needs an rng")
    attended = dropout(attended, params.dropout_rate, train_mode, rng)
    delta = matmul(attended, params.psi_w) + params.psi_b
    out = w_in + delta
    if params.use_layer_norm:
        out = layer_norm(out, params.ln_gamma, params.ln_beta)
    return ClassifierWeights(out)


def cwt_forward(w: ClassifierWeights, fmap: FeatureMap, params: CWTParams,
                train_mode: bool = False,
                rng: np.random.Generator | None = None) -> ClassifierWeights:
    """Adapt classifier weights to one query image's features."""
    return _attend(w, fmap.features, params, train_mode, rng)


def cwt_forward_support_variant(w: ClassifierWeights,
                                support_features: list[FeatureMap],
                                params: CWTParams, train_mode: bool = False,
                                rng: np.random.Generator | None = None) -> ClassifierWeights:
    """Same computation with all support pixels as keys and values."""
    return _attend(w, concat_support_features(support_features), params,
                   train_mode, rng)


def predict_pixels(w: ClassifierWeights, fmap: FeatureMap) -> tuple[Tensor, np.ndarray]:
    """Per-pixel logits [n, 2] and the argmax mask; ties go to background."""
    feats = fmap.features
    if feats.shape[1] != w.feature_dim:
        raise ShapeError(
            f"features {feats.shape} do not match classifier width {w.feature_dim}")
    logits = matmul(feats, w.w.t())
    mask = logits.data.argmax(axis=1).astype(np.uint8).reshape(fmap.spatial)
    return logits, mask


def query_loss(w_star: ClassifierWeights, fmap: FeatureMap,
               binary_mask: np.ndarray) -> Tensor:
    """Pixel cross-entropy of the adapted classifier on one query image."""
    logits, _ = predict_pixels(w_star, fmap)
    labels = np.asarray(binary_mask).reshape(-1).astype(np.intp)
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"{logits.shape[0]} pixels but {labels.shape[0]} mask labels")
    return cross_entropy_smoothed(logits, labels, epsilon=0.0)
