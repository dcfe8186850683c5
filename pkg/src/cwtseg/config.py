"""Run configuration: JSON schema, named presets, and resolution.

A run config is a plain nested dict with sections ``run``, ``dataset``,
``dataset_b``, ``split``, ``model``, ``pretrain``, ``inner``, ``meta``,
``eval``, and ``ablate``. ``resolve`` layers a named preset, an optional
JSON file, and explicit overrides, then materializes every default so the
result can be written out with nothing hidden. ``to_objects`` turns the
resolved dict into the typed configs the pipeline consumes, which also
validates it end to end.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adaptation import InnerLoopConfig
from .backbone import PretrainConfig
from .errors import ConfigError
from .meta import EvalProtocol, MetaTrainConfig
from .taskgen import DatasetSpec, SplitSpec, VariationKnobs

__all__ = [
    "PRESET_NAMES",
    "VARIATION_PRESETS",
    "preset",
    "variation_knobs",
    "load_config",
    "deep_merge",
    "resolve",
    "config_fingerprint",
    "RunObjects",
    "to_objects",
    "precision_dtype",
]

# Named variation levels for the synthetic benchmark. "high" is the setting
# the directional comparisons are tuned against: wide scale and position
# spread, rotation, bimodal per-class styles so a 1-shot support only
# partially describes the query's appearance, frequent occlusion, and 2-4
# same-salience objects from other classes per image so foreground is
# defined by the support mask rather than by saliency.
VARIATION_PRESETS: dict[str, dict] = {
    "none": {
        "scale_range": [0.45, 0.45],
        "position_jitter": 0.0,
        "rotation_range": 0.0,
        "color_jitter": 0.0,
        "style_offset": 0.0,
        "occlusion_prob": 0.0,
        "distractor_range": [0, 0],
    },
    "low": {
        "scale_range": [0.35, 0.5],
        "position_jitter": 0.2,
        "rotation_range": 0.2,
        "color_jitter": 0.05,
        "style_offset": 0.02,
        "occlusion_prob": 0.15,
        "distractor_range": [0, 1],
    },
    "high": {
        "scale_range": [0.25, 0.6],
        "position_jitter": 0.4,
        "rotation_range": 0.5,
        "color_jitter": 0.04,
        "style_offset": 0.06,
        "occlusion_prob": 0.5,
        "distractor_range": [2, 4],
    },
}

_TOY = {
    "run": {"seed": 0, "precision": "f32", "threads": 1},
    "dataset": {
        "domain": "shapesA",
        "num_classes": 12,
        "images_per_class": 60,
        "image_size": 32,
        "variation": "high",
        "seed": 7,
    },
    "dataset_b": {
        "domain": "shapesB",
        "num_classes": 12,
        "images_per_class": 60,
        "image_size": 32,
        "variation": "high",
        "seed": 8,
    },
    "split": {"split_index": 0, "num_splits": 4},
    "model": {
        "feature_dim": 32,
        "attn_dim": 128,
        "num_heads": 4,
        "dropout_rate": 0.1,
        "use_layer_norm": True,
        "shared_qkv": False,
        "scale_mode": "per_head",
    },
    "pretrain": {
        "epochs": 12,
        "batch_size": 8,
        "lr": 2.5e-3,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "label_smoothing": 0.1,
        "schedule": "cosine",
        "flip_prob": 0.5,
    },
    "inner": {
        "iterations": 50,
        "lr": 0.1,
        "momentum": 0.0,
        "weight_decay": 0.0,
        # at a 50-iteration budget a random start underfits; starting from
        # the support prototypes reaches the fit that 200 iterations give
        # the full-scale recipe
        "init": "prototype",
        "init_sigma": 0.01,
    },
    "meta": {
        "epochs": 5,
        "episodes_per_epoch": 200,
        "outer_lr": 1e-3,
        "k_shot": 1,
        "q_queries": 1,
        "attend_to": "query",
    },
    "eval": {
        "trials": 2,
        "episodes_per_trial": 100,
        "k_shot": 1,
        "q_queries": 1,
        "include_background": False,
    },
    "ablate": {"num_seeds": 5},
}

# Full-scale recipe: model and optimizer constants at their published
# values; the synthetic dataset is scaled up to keep episodes meaningful.
def _paper_faithful() -> dict:
    cfg = copy.deepcopy(_TOY)
    cfg["dataset"].update({"num_classes": 20, "images_per_class": 100,
                           "image_size": 64})
    cfg["dataset_b"].update({"num_classes": 20, "images_per_class": 100,
                             "image_size": 64})
    cfg["model"].update({"feature_dim": 512, "attn_dim": 2048, "num_heads": 4})
    cfg["pretrain"].update({"epochs": 20})
    cfg["inner"].update({"iterations": 200, "init": "random_normal"})
    cfg["meta"].update({"epochs": 20})
    cfg["eval"].update({"trials": 5, "episodes_per_trial": 1000})
    return cfg


_PRESETS = {"toy": _TOY, "paper-faithful": _paper_faithful()}
PRESET_NAMES = tuple(sorted(_PRESETS))


def preset(name: str) -> dict:
    """Deep copy of a named preset."""
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}")
    return copy.deepcopy(_PRESETS[name])


def variation_knobs(value: str | dict) -> VariationKnobs:
    """Accepts a named level or an explicit knob dict."""
    if isinstance(value, str):
        if value not in VARIATION_PRESETS:
            raise ConfigError(f"unknown variation level {value!r}; expected one of "
                              f"{tuple(sorted(VARIATION_PRESETS))} or an explicit dict")
        value = VARIATION_PRESETS[value]
    return VariationKnobs.from_dict(value)


def load_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        loaded = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
    if not isinstance(loaded, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return loaded


def deep_merge(base: dict, override: dict) -> dict:
    """New dict; nested dicts merge recursively, other values replace."""
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def resolve(preset_name: str = "toy", config_path: str | Path | None = None,
            overrides: dict | None = None) -> dict:
    """Layer preset <- file <- overrides and materialize every default.

    Unknown sections or keys are rejected so typos fail loudly. Named
    variation levels are expanded to explicit knob dicts, which keeps the
    resolved config free of hidden defaults.
    """
    cfg = preset(preset_name)
    for layer in (load_config(config_path) if config_path else None, overrides):
        if not layer:
            continue
        for section, value in layer.items():
            if section not in cfg:
                raise ConfigError(f"unknown config section {section!r}; expected one "
                                  f"of {tuple(sorted(cfg))}")
            if not isinstance(value, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            unknown = set(value) - set(cfg[section])
            if unknown:
                raise ConfigError(f"unknown key(s) {sorted(unknown)} in config "
                                  f"section {section!r}")
        cfg = deep_merge(cfg, layer)
    for section in ("dataset", "dataset_b"):
        cfg[section]["variation"] = variation_knobs(cfg[section]["variation"]).to_dict()
    to_objects(cfg)  # full validation pass
    return cfg


def config_fingerprint(cfg: dict) -> str:
    """sha256 of the canonical JSON encoding."""
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def precision_dtype(precision: str):
    if precision == "f32":
        return np.float32
    if precision == "f64":
        return np.float64
    raise ConfigError(f"precision must be f32 or f64, got {precision!r}")


@dataclass
class RunObjects:
    """Typed view of a resolved config."""

    seed: int
    dtype: type
    threads: int
    dataset: DatasetSpec
    dataset_b: DatasetSpec
    split: SplitSpec
    feature_dim: int
    attn_dim: int
    num_heads: int
    dropout_rate: float
    use_layer_norm: bool
    shared_qkv: bool
    scale_mode: str
    pretrain: PretrainConfig
    inner: InnerLoopConfig
    meta: MetaTrainConfig
    protocol: EvalProtocol
    num_ablation_seeds: int


def to_objects(cfg: dict) -> RunObjects:
    run = cfg["run"]
    seed = int(run["seed"])
    dtype = precision_dtype(run["precision"])
    threads = int(run["threads"])
    if threads < 1:
        raise ConfigError(f"run.threads must be >= 1, got {threads}")

    def spec_of(section: str) -> DatasetSpec:
        d = dict(cfg[section])
        d["variation"] = variation_knobs(d["variation"])
        spec = DatasetSpec(domain=d["domain"], num_classes=int(d["num_classes"]),
                           images_per_class=int(d["images_per_class"]),
                           image_size=int(d["image_size"]), variation=d["variation"],
                           seed=int(d["seed"]))
        spec.validate()
        return spec

    dataset = spec_of("dataset")
    dataset_b = spec_of("dataset_b")
    split = SplitSpec(split_index=int(cfg["split"]["split_index"]),
                      num_splits=int(cfg["split"]["num_splits"]))
    split.validate(dataset.num_classes)
    split.validate(dataset_b.num_classes)

    m = cfg["model"]
    if int(m["attn_dim"]) % int(m["num_heads"]) != 0:
        raise ConfigError(f"model.attn_dim {m['attn_dim']} is not divisible by "
                          f"model.num_heads {m['num_heads']}")

    p = cfg["pretrain"]
    pretrain_cfg = PretrainConfig(epochs=int(p["epochs"]), batch_size=int(p["batch_size"]),
                                  lr=float(p["lr"]), momentum=float(p["momentum"]),
                                  weight_decay=float(p["weight_decay"]),
                                  label_smoothing=float(p["label_smoothing"]),
                                  schedule=p["schedule"], flip_prob=float(p["flip_prob"]),
                                  seed=seed)
    pretrain_cfg.validate()

    i = cfg["inner"]
    inner = InnerLoopConfig(iterations=int(i["iterations"]), lr=float(i["lr"]),
                            momentum=float(i["momentum"]),
                            weight_decay=float(i["weight_decay"]), init=i["init"],
                            init_sigma=float(i["init_sigma"]), seed=seed)
    inner.validate()

    t = cfg["meta"]
    meta_cfg = MetaTrainConfig(epochs=int(t["epochs"]),
                               episodes_per_epoch=int(t["episodes_per_epoch"]),
                               outer_lr=float(t["outer_lr"]), inner=inner,
                               k_shot=int(t["k_shot"]), q_queries=int(t["q_queries"]),
                               attend_to=t["attend_to"], seed=seed)
    meta_cfg.validate()

    e = cfg["eval"]
    protocol = EvalProtocol(trials=int(e["trials"]),
                            episodes_per_trial=int(e["episodes_per_trial"]),
                            k_shot=int(e["k_shot"]), q_queries=int(e["q_queries"]),
                            seed_base=seed,
                            include_background=bool(e["include_background"]),
                            inner=inner)
    protocol.validate()

    num_seeds = int(cfg["ablate"]["num_seeds"])
    if num_seeds < 1:
        raise ConfigError(f"ablate.num_seeds must be >= 1, got {num_seeds}")

    return RunObjects(seed=seed, dtype=dtype, threads=threads, dataset=dataset,
                      dataset_b=dataset_b, split=split,
                      feature_dim=int(m["feature_dim"]), attn_dim=int(m["attn_dim"]),
                      num_heads=int(m["num_heads"]),
                      dropout_rate=float(m["dropout_rate"]),
                      use_layer_norm=bool(m["use_layer_norm"]),
                      shared_qkv=bool(m["shared_qkv"]), scale_mode=m["scale_mode"],
                      pretrain=pretrain_cfg, inner=inner, meta=meta_cfg,
                      protocol=protocol, num_ablation_seeds=num_seeds)
