"""Estimator facades with the scikit-learn fit/predict/get_params contract.

``BinaryPixelClassifier`` exposes the inner-loop pixel classifier over
plain (n_pixels, d) feature matrices. ``FewShotSegmenter`` wraps the whole
two-stage pipeline: ``fit`` consumes a generated dataset (episodic
segmentation data is not tabular, so the X argument is a Dataset), then
``predict`` segments query images given a support set, and ``score``
returns mean mIoU over held-out episodes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .adaptation import (
    ClassifierWeights,
    InnerLoopConfig,
    cwt_forward,
    fit_classifier_inner,
    init_classifier,
    init_cwt,
    predict_pixels,
)
from .backbone import FeatureMap, PretrainConfig, encode, freeze, pretrain
from .errors import ConfigError
from .meta import EvalProtocol, MetaTrainConfig, meta_test, meta_train
from .taskgen import Dataset, SegSample, SplitSpec, split_classes
from .tensor import Tensor, make_rng

__all__ = ["BinaryPixelClassifier", "FewShotSegmenter"]


def _as_feature_map(X: np.ndarray) -> FeatureMap:
    # one pixel per row; treat the batch as an n x 1 image
    t = Tensor(np.asarray(X, dtype=np.float64), requires_grad=False)
    return FeatureMap(features=t, spatial=(X.shape[0], 1), source_id=-1)


class BinaryPixelClassifier(BaseEstimator):
    """Foreground/background linear pixel classifier fit by plain SGD.

    Parameters mirror the episodic inner loop; X is (n_pixels, d) and y is
    binary with 1 = foreground.
    """

    def __init__(self, iterations: int = 200, lr: float = 0.1,
                 momentum: float = 0.0, weight_decay: float = 0.0,
                 init: str = "random_normal", init_sigma: float = 0.01,
                 seed: int = 0):
        self.iterations = iterations
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.init = init
        self.init_sigma = init_sigma
        self.seed = seed

    def _config(self) -> InnerLoopConfig:
        cfg = InnerLoopConfig(iterations=self.iterations, lr=self.lr,
                              momentum=self.momentum,
                              weight_decay=self.weight_decay, init=self.init,
                              init_sigma=self.init_sigma, seed=self.seed)
        cfg.validate()
        return cfg

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValueError(f"y must be 1-d with {X.shape[0]} entries, "
                             f"got shape {y.shape}")
        labels = np.unique(y)
        if not np.isin(labels, [0, 1]).all():
            raise ValueError(f"y must be binary 0/1, got values {labels}")
        cfg = self._config()
        fmap = _as_feature_map(X)
        mask = y.astype(np.uint8).reshape(-1, 1)
        w0 = init_classifier([fmap], [mask], cfg, rng=make_rng(self.seed, 900))
        w, log = fit_classifier_inner(w0, [fmap], [mask], cfg)
        self.weights_ = w.w.data.copy()
        self.n_features_in_ = X.shape[1]
        self.fit_log_ = log
        return self

    def decision_function(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected "
                             f"{self.n_features_in_}")
        logits = X @ self.weights_.T
        return logits[:, 1] - logits[:, 0]

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(np.uint8)

    def score(self, X, y):
        y = np.asarray(y)
        return float((self.predict(X) == y).mean())


class FewShotSegmenter(BaseEstimator):
    """Two-stage pipeline: supervised pre-training on base classes, then
    episodic meta-training of the query-conditioned weight adapter."""

    def __init__(self, feature_dim: int = 32, attn_dim: int = 128,
                 num_heads: int = 4, dropout_rate: float = 0.1,
                 pretrain_epochs: int = 12, pretrain_batch_size: int = 8,
                 pretrain_lr: float = 2.5e-3, meta_epochs: int = 5,
                 episodes_per_epoch: int = 200, outer_lr: float = 1e-3,
                 inner_iterations: int = 50, inner_lr: float = 0.1,
                 inner_init: str = "prototype",
                 k_shot: int = 1, attend_to: str = "query",
                 split_index: int = 0, num_splits: int = 4,
                 precision: str = "f32", seed: int = 0):
        self.feature_dim = feature_dim
        self.attn_dim = attn_dim
        self.num_heads = num_heads
        self.dropout_rate = dropout_rate
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_batch_size = pretrain_batch_size
        self.pretrain_lr = pretrain_lr
        self.meta_epochs = meta_epochs
        self.episodes_per_epoch = episodes_per_epoch
        self.outer_lr = outer_lr
        self.inner_iterations = inner_iterations
        self.inner_lr = inner_lr
        self.inner_init = inner_init
        self.k_shot = k_shot
        self.attend_to = attend_to
        self.split_index = split_index
        self.num_splits = num_splits
        self.precision = precision
        self.seed = seed

    def _dtype(self):
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        return np.float32 if self.precision == "f32" else np.float64

    def _inner(self) -> InnerLoopConfig:
        cfg = InnerLoopConfig(iterations=self.inner_iterations, lr=self.inner_lr,
                              init=self.inner_init, seed=self.seed)
        cfg.validate()
        return cfg

    def fit(self, X: Dataset, y=None):
        """X is a generated Dataset; base/novel classes follow the split."""
        if not isinstance(X, Dataset):
            raise TypeError("X must be a cwtseg Dataset (see taskgen.generate_dataset)")
        split = SplitSpec(split_index=self.split_index, num_splits=self.num_splits)
        base, novel = split_classes(X, split)
        result = pretrain(base, PretrainConfig(epochs=self.pretrain_epochs,
                                               batch_size=self.pretrain_batch_size,
                                               lr=self.pretrain_lr, seed=self.seed),
                          feature_dim=self.feature_dim, dtype=self._dtype())
        self.backbone_ = freeze(result.params)
        self.pretrain_losses_ = result.epoch_losses
        cwt = init_cwt(self.feature_dim, self.attn_dim, self.num_heads,
                       seed=self.seed, dropout_rate=self.dropout_rate,
                       dtype=self._dtype())
        cfg = MetaTrainConfig(epochs=self.meta_epochs,
                              episodes_per_epoch=self.episodes_per_epoch,
                              outer_lr=self.outer_lr, inner=self._inner(),
                              k_shot=self.k_shot, attend_to=self.attend_to,
                              seed=self.seed)
        self.cwt_, log = meta_train(self.backbone_, base, cwt, cfg)
        self.meta_losses_ = log["episode_losses"]
        self.base_class_ids_ = base.class_ids
        self.novel_class_ids_ = novel.class_ids
        return self

    def _fit_support(self, support_images, support_masks) -> tuple[ClassifierWeights, list[FeatureMap]]:
        support_maps = []
        masks = []
        for img, mask in zip(support_images, support_masks):
            sample = SegSample(image=np.asarray(img, dtype=np.float32),
                               mask=np.asarray(mask, dtype=np.uint8),
                               class_set=frozenset(), sample_id=-1)
            support_maps.append(encode(sample, self.backbone_))
            masks.append(sample.mask)
        inner = self._inner()
        w0 = init_classifier(support_maps, masks, inner,
                             rng=make_rng(self.seed, 901))
        w, _ = fit_classifier_inner(w0, support_maps, masks, inner)
        return w, support_maps

    def predict(self, X, support_images=None, support_masks=None):
        """Binary masks for query images X given a support set.

        X: array-like (n, C, H, W) or a list of (C, H, W) images."""
        check_is_fitted(self, "cwt_")
        if support_images is None or support_masks is None:
            raise ValueError("predict needs support_images and support_masks "
                             "defining the episode's class")
        w, _ = self._fit_support(support_images, support_masks)
        out = []
        for img in X:
            sample = SegSample(image=np.asarray(img, dtype=np.float32),
                               mask=np.zeros(np.asarray(img).shape[1:], dtype=np.uint8),
                               class_set=frozenset(), sample_id=-1)
            qmap = encode(sample, self.backbone_)
            w_star = cwt_forward(w, qmap, self.cwt_, train_mode=False)
            _, pred = predict_pixels(w_star, qmap)
            out.append(pred)
        return np.stack(out)

    def score(self, X: Dataset, y=None, trials: int = 2,
              episodes_per_trial: int = 50) -> float:
        """Mean mIoU of the adapted pipeline on X's novel-split episodes."""
        check_is_fitted(self, "cwt_")
        split = SplitSpec(split_index=self.split_index, num_splits=self.num_splits)
        _, novel = split_classes(X, split)
        protocol = EvalProtocol(trials=trials, episodes_per_trial=episodes_per_trial,
                                k_shot=self.k_shot, seed_base=self.seed,
                                inner=self._inner())
        report = meta_test(self.backbone_, self.cwt_, novel, protocol,
                           mode="full_cwt", train_class_ids=self.base_class_ids_)
        return report.mean_miou
