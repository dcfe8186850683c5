"""Episodic two-loop training and evaluation.

Meta-training: per episode, fit a classifier on the support set (inner
loop), adapt it to the query image, and take one SGD step on the adapter
parameters from the query pixel loss (outer loop). The backbone stays
frozen throughout.

Evaluation: per trial, sample episodes from held-out classes, segment
each query, and accumulate integer intersection/union counts. Per-class
IoU sums counts over a class's episodes; mIoU averages classes equally.
All randomness is keyed per (trial, episode), so reports are reproducible
bit-for-bit and independent of evaluation order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .adaptation import (
    ClassifierWeights,
    CWTParams,
    InnerLoopConfig,
    cwt_forward,
    cwt_forward_support_variant,
    fit_classifier_inner,
    init_classifier,
    predict_pixels,
    query_loss,
)
from .backbone import BackboneParams, FeatureMap, encode
from .checkpoint import hash_tensors
from .errors import ConfigError
from .optim import SgdOptimizer
from .taskgen import Dataset, EpisodeTask, sample_episode
from .tensor import Tensor, backward, make_rng

__all__ = [
    "MetaTrainConfig",
    "EvalProtocol",
    "EvalReport",
    "ABLATION_MODES",
    "meta_train",
    "meta_train_whole_model",
    "meta_test",
    "cross_domain_eval",
    "miou",
    "episode_counts",
]

ABLATION_MODES = ("full_cwt", "classifier_only", "whole_model_meta", "attend_support")


@dataclass
class MetaTrainConfig:
    epochs: int = 20
    episodes_per_epoch: int = 200
    outer_lr: float = 1e-3
    inner: InnerLoopConfig = field(default_factory=InnerLoopConfig)
    k_shot: int = 1
    q_queries: int = 1
    attend_to: str = "query"  # "support" trains the attend-support variant
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.episodes_per_epoch < 1:
            raise ConfigError(
                f"episodes_per_epoch must be >= 1, got {self.episodes_per_epoch}")
        if self.outer_lr < 0:
            raise ConfigError(f"outer_lr must be non-negative, got {self.outer_lr}")
        if self.attend_to not in ("query", "support"):
            raise ConfigError(f"attend_to must be query or support, got {self.attend_to!r}")
        self.inner.validate()


@dataclass
class EvalProtocol:
    trials: int = 5
    episodes_per_trial: int = 1000
    k_shot: int = 1
    q_queries: int = 1
    seed_base: int = 0
    include_background: bool = False
    inner: InnerLoopConfig = field(default_factory=InnerLoopConfig)

    def validate(self) -> None:
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if self.episodes_per_trial < 1:
            raise ConfigError(
                f"episodes_per_trial must be >= 1, got {self.episodes_per_trial}")
        self.inner.validate()


@dataclass
class EvalReport:
    mode: str
    per_trial_miou: list[float]
    mean_miou: float
    std_miou: float
    ci95_miou: float
    per_class_iou: dict[int, float]
    background_iou: float
    records: list[dict]
    config_fingerprint: dict
    hash_audit_passed: bool | None = None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "per_trial_miou": self.per_trial_miou,
            "mean_miou": self.mean_miou,
            "std_miou": self.std_miou,
            "ci95_miou": self.ci95_miou,
            "per_class_iou": {str(k): v for k, v in sorted(self.per_class_iou.items())},
            "background_iou": self.background_iou,
            "hash_audit_passed": self.hash_audit_passed,
            "config_fingerprint": self.config_fingerprint,
            "records": self.records,
        }


def episode_counts(pred_mask: np.ndarray, true_mask: np.ndarray) -> dict[str, int]:
    """Integer foreground/background intersection and union pixel counts."""
    pred = np.asarray(pred_mask).astype(bool)
    true = np.asarray(true_mask).astype(bool)
    if pred.shape != true.shape:
        raise ConfigError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    return {
        "fg_intersection": int((pred & true).sum()),
        "fg_union": int((pred | true).sum()),
        "bg_intersection": int((~pred & ~true).sum()),
        "bg_union": int((~pred | ~true).sum()),
    }


def _ratio(intersection: int, union: int) -> float:
    if union == 0:
        return 1.0 if intersection == 0 else 0.0
    return intersection / union


def miou(records: Sequence[dict], include_background: bool = False) -> float:
    """Mean over classes of per-class IoU.

    Within a class, intersections and unions are summed over its episodes
    before dividing; classes then enter the mean unweighted. Background
    counts aggregate into one extra class when requested."""
    by_class: dict[int, list[int]] = {}
    bg = [0, 0]
    for r in records:
        acc = by_class.setdefault(int(r["class_id"]), [0, 0])
        acc[0] += r["fg_intersection"]
        acc[1] += r["fg_union"]
        bg[0] += r["bg_intersection"]
        bg[1] += r["bg_union"]
    if not by_class:
        raise ConfigError("cannot aggregate an empty record list")
    ious = [_ratio(i, u) for i, u in by_class.values()]
    if include_background:
        ious.append(_ratio(bg[0], bg[1]))
    return float(np.mean(ious))


def _require_frozen(backbone: BackboneParams) -> None:
    if not backbone.frozen:
        raise ConfigError("backbone must be frozen before episodic training; "
                          "call freeze() after pre-training")


def _episode_features(episode: EpisodeTask, backbone: BackboneParams
                      ) -> tuple[list[FeatureMap], list[np.ndarray]]:
    fmaps = [encode(s, backbone) for s in episode.support]
    masks = [s.mask for s in episode.support]
    return fmaps, masks


def _fit_episode_classifier(episode: EpisodeTask, backbone: BackboneParams,
                            inner: InnerLoopConfig,
                            rng: np.random.Generator) -> tuple[ClassifierWeights, list[FeatureMap]]:
    support_maps, support_masks = _episode_features(episode, backbone)
    w0 = init_classifier(support_maps, support_masks, inner, rng=rng)
    w, _ = fit_classifier_inner(w0, support_maps, support_masks, inner)
    return w, support_maps


def meta_train(backbone: BackboneParams, pool: Dataset, cwt: CWTParams,
               cfg: MetaTrainConfig) -> tuple[CWTParams, dict]:
    """Outer-loop SGD on the adapter parameters; returns it with a run log
    holding per-episode losses."""
    cfg.validate()
    _require_frozen(backbone)
    opt = SgdOptimizer(cwt.tensors(), lr=cfg.outer_lr)
    losses: list[float] = []
    for epoch in range(cfg.epochs):
        for i in range(cfg.episodes_per_epoch):
            ep_rng = make_rng(cfg.seed, 400, epoch, i)
            episode = sample_episode(pool, pool.class_ids, cfg.k_shot,
                                     cfg.q_queries, ep_rng)
            w, support_maps = _fit_episode_classifier(
                episode, backbone, cfg.inner, make_rng(cfg.seed, 401, epoch, i))
            drop_rng = make_rng(cfg.seed, 402, epoch, i)
            total = None
            for query in episode.query:
                qmap = encode(query, backbone)
                if cfg.attend_to == "query":
                    w_star = cwt_forward(w, qmap, cwt, train_mode=True, rng=drop_rng)
                else:
                    w_star = cwt_forward_support_variant(
                        w, support_maps, cwt, train_mode=True, rng=drop_rng)
                loss = query_loss(w_star, qmap, query.mask)
                total = loss if total is None else total + loss
            total = total * (1.0 / len(episode.query))
            backward(total)
            opt.step()
            losses.append(total.item())
    epochs_mean = [float(np.mean(chunk)) for chunk in
                   np.array_split(losses, cfg.epochs)] if losses else []
    log = {
        "stage": "meta_train",
        "epochs": cfg.epochs,
        "episodes_per_epoch": cfg.episodes_per_epoch,
        "outer_lr": cfg.outer_lr,
        "inner_iterations": cfg.inner.iterations,
        "inner_lr": cfg.inner.lr,
        "k_shot": cfg.k_shot,
        "q_queries": cfg.q_queries,
        "attend_to": cfg.attend_to,
        "seed": cfg.seed,
        "episode_losses": losses,
        "epoch_losses": epochs_mean,
    }
    return cwt, log


def meta_train_whole_model(backbone: BackboneParams, pool: Dataset,
                           cfg: MetaTrainConfig) -> tuple[BackboneParams, dict]:
    """Single-stage episodic baseline: the classifier is the pair of
    support prototypes (no inner SGD, no adapter) and the query loss
    backpropagates into the whole backbone."""
    cfg.validate()
    if backbone.frozen:
        raise ConfigError("whole-model episodic training needs an unfrozen backbone")
    proto_cfg = InnerLoopConfig(iterations=0, init="prototype", seed=cfg.inner.seed)
    opt = SgdOptimizer(backbone.tensors(), lr=cfg.outer_lr)
    losses: list[float] = []
    for epoch in range(cfg.epochs):
        for i in range(cfg.episodes_per_epoch):
            ep_rng = make_rng(cfg.seed, 410, epoch, i)
            episode = sample_episode(pool, pool.class_ids, cfg.k_shot,
                                     cfg.q_queries, ep_rng)
            support_maps = [encode(s, backbone) for s in episode.support]
            support_masks = [s.mask for s in episode.support]
            w = init_classifier(support_maps, support_masks, proto_cfg,
                                track_gradients=True)
            total = None
            for query in episode.query:
                qmap = encode(query, backbone)
                loss = query_loss(w, qmap, query.mask)
                total = loss if total is None else total + loss
            total = total * (1.0 / len(episode.query))
            backward(total)
            opt.step()
            losses.append(total.item())
    log = {
        "stage": "meta_train_whole_model",
        "epochs": cfg.epochs,
        "episodes_per_epoch": cfg.episodes_per_epoch,
        "outer_lr": cfg.outer_lr,
        "seed": cfg.seed,
        "episode_losses": losses,
    }
    return backbone, log


def _adapt_for_mode(mode: str, w: ClassifierWeights, qmap: FeatureMap,
                    support_maps: list[FeatureMap],
                    cwt: CWTParams | None) -> ClassifierWeights:
    if mode in ("classifier_only", "whole_model_meta"):
        return w
    if cwt is None:
        raise ConfigError(f"mode {mode!r} needs adapter parameters")
    if mode == "full_cwt":
        return cwt_forward(w, qmap, cwt, train_mode=False)
    if mode == "attend_support":
        return cwt_forward_support_variant(w, support_maps, cwt, train_mode=False)
    raise ConfigError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")


def meta_test(backbone: BackboneParams, cwt: CWTParams | None,
              novel_pool: Dataset, protocol: EvalProtocol,
              mode: str = "full_cwt",
              train_class_ids: Iterable[int] | None = None,
              workers: int = 1) -> EvalReport:
    """Held-out evaluation; parameters are read-only throughout.

    Episodes are mutually independent (each draws its own keyed rng over a
    read-only model), so with ``workers > 1`` they evaluate concurrently;
    records merge in episode order, keeping the report bit-identical to a
    single-threaded run."""
    protocol.validate()
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    if mode not in ABLATION_MODES:
        raise ConfigError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
    if train_class_ids is not None:
        overlap = set(train_class_ids) & set(novel_pool.class_ids)
        if overlap:
            raise ConfigError(
                f"evaluation classes {sorted(overlap)} overlap the training classes; "
                f"base and novel class sets must be disjoint")
    inner = InnerLoopConfig(iterations=0, init="prototype") \
        if mode == "whole_model_meta" else protocol.inner

    audited = list(backbone.tensors()) + (cwt.tensors() if cwt is not None else [])
    hash_before = hash_tensors(audited)

    def run_episode(trial: int, i: int) -> dict:
        trial_seed = protocol.seed_base + trial
        episode = sample_episode(novel_pool, novel_pool.class_ids,
                                 protocol.k_shot, protocol.q_queries,
                                 make_rng(trial_seed, 500, i))
        w, support_maps = _fit_episode_classifier(
            episode, backbone, inner, make_rng(trial_seed, 501, i))
        counts = {"fg_intersection": 0, "fg_union": 0,
                  "bg_intersection": 0, "bg_union": 0}
        for query in episode.query:
            qmap = encode(query, backbone)
            w_star = _adapt_for_mode(mode, w, qmap, support_maps, cwt)
            _, pred = predict_pixels(w_star, qmap)
            for key, val in episode_counts(pred, query.mask).items():
                counts[key] += val
        return {"trial": trial, "episode": i, "class_id": episode.class_id,
                **counts,
                "fg_iou": _ratio(counts["fg_intersection"], counts["fg_union"]),
                "bg_iou": _ratio(counts["bg_intersection"], counts["bg_union"])}

    records: list[dict] = []
    per_trial: list[float] = []
    for trial in range(protocol.trials):
        if workers == 1:
            trial_records = [run_episode(trial, i)
                             for i in range(protocol.episodes_per_trial)]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                trial_records = list(pool.map(lambda i: run_episode(trial, i),
                                              range(protocol.episodes_per_trial)))
        per_trial.append(miou(trial_records, protocol.include_background))
        records.extend(trial_records)

    by_class: dict[int, list[int]] = {}
    bg = [0, 0]
    for r in records:
        acc = by_class.setdefault(int(r["class_id"]), [0, 0])
        acc[0] += r["fg_intersection"]
        acc[1] += r["fg_union"]
        bg[0] += r["bg_intersection"]
        bg[1] += r["bg_union"]
    per_class = {c: _ratio(i, u) for c, (i, u) in sorted(by_class.items())}

    hash_after = hash_tensors(audited)
    mean = float(np.mean(per_trial))
    std = float(np.std(per_trial))
    ci95 = 1.96 * std / math.sqrt(len(per_trial))
    fingerprint = {
        "mode": mode,
        "trials": protocol.trials,
        "episodes_per_trial": protocol.episodes_per_trial,
        "k_shot": protocol.k_shot,
        "q_queries": protocol.q_queries,
        "seed_base": protocol.seed_base,
        "include_background": protocol.include_background,
        "inner_iterations": inner.iterations,
        "inner_lr": inner.lr,
        "inner_init": inner.init,
        "novel_classes": list(novel_pool.class_ids),
        "domain": novel_pool.spec.domain,
    }
    return EvalReport(mode=mode, per_trial_miou=per_trial, mean_miou=mean,
                      std_miou=std, ci95_miou=ci95, per_class_iou=per_class,
                      background_iou=_ratio(bg[0], bg[1]), records=records,
                      config_fingerprint=fingerprint,
                      hash_audit_passed=hash_before == hash_after)


def cross_domain_eval(backbone: BackboneParams, cwt: CWTParams | None,
                      novel_pool_b: Dataset, protocol: EvalProtocol,
                      mode: str = "full_cwt",
                      train_class_ids: Iterable[int] | None = None,
                      workers: int = 1) -> EvalReport:
    """Evaluate a model trained on one domain against another domain's
    novel classes, with zero parameter mutation (hash-audited)."""
    report = meta_test(backbone, cwt, novel_pool_b, protocol, mode=mode,
                       train_class_ids=train_class_ids, workers=workers)
    if not report.hash_audit_passed:
        raise RuntimeError("parameters changed during cross-domain evaluation")
    report.config_fingerprint["cross_domain"] = True
    return report
