"""Few-shot semantic segmentation toolkit.

Pipeline: pre-train a small per-pixel feature backbone on base classes,
freeze it, fit a binary pixel classifier on each episode's support set,
and meta-learn an attention module that adapts the classifier weights to
each query image. Includes synthetic task generation, episodic training,
mIoU evaluation, ablation and cross-domain protocols, and a CLI.
"""

from .adaptation import (
    ClassifierWeights,
    CWTParams,
    InnerLoopConfig,
    cwt_forward,
    fit_classifier_inner,
    init_classifier,
    init_cwt,
    predict_pixels,
)
from .backbone import (
    BackboneParams,
    FeatureMap,
    PretrainConfig,
    encode,
    freeze,
    pretrain,
)
from .estimator import BinaryPixelClassifier, FewShotSegmenter
from .meta import (
    ABLATION_MODES,
    EvalProtocol,
    EvalReport,
    MetaTrainConfig,
    cross_domain_eval,
    meta_test,
    meta_train,
    meta_train_whole_model,
    miou,
)
from .taskgen import (
    Dataset,
    DatasetSpec,
    EpisodeTask,
    SegSample,
    SplitSpec,
    VariationKnobs,
    export_dataset,
    generate_dataset,
    load_dataset,
    sample_episode,
    split_classes,
)
from .tensor import Tensor, backward, finite_diff_check, make_rng

__all__ = [
    "ABLATION_MODES",
    "BackboneParams",
    "BinaryPixelClassifier",
    "ClassifierWeights",
    "CWTParams",
    "Dataset",
    "DatasetSpec",
    "EpisodeTask",
    "EvalProtocol",
    "EvalReport",
    "FeatureMap",
    "FewShotSegmenter",
    "InnerLoopConfig",
    "MetaTrainConfig",
    "PretrainConfig",
    "SegSample",
    "SplitSpec",
    "Tensor",
    "VariationKnobs",
    "backward",
    "cross_domain_eval",
    "cwt_forward",
    "encode",
    "export_dataset",
    "finite_diff_check",
    "fit_classifier_inner",
    "freeze",
    "generate_dataset",
    "init_classifier",
    "init_cwt",
    "load_dataset",
    "make_rng",
    "meta_test",
    "meta_train",
    "meta_train_whole_model",
    "miou",
    "pretrain",
    "predict_pixels",
    "sample_episode",
    "split_classes",
]

__version__ = "0.1.0"
