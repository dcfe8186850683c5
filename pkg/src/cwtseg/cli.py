"""Command-line pipeline: dataset generation, two-stage training,
evaluation, ablation sweeps, and gradient verification.

Exit codes are a stable contract: 0 success, 1 configuration/validation
error, 2 runtime check failure (gradient check above tolerance, parameter
hash audit failure).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import reports
from .adaptation import init_cwt
from .backbone import freeze, pretrain
from .checkpoint import (
    CheckpointError,
    hash_tensors,
    load_backbone,
    load_cwt,
    save_backbone,
    save_cwt,
)
from .config import PRESET_NAMES, config_fingerprint, resolve, to_objects
from .errors import ConfigError
from .gradcheck import TOLERANCE, registry, run_checks
from .meta import (
    ABLATION_MODES,
    cross_domain_eval,
    meta_test,
    meta_train,
    meta_train_whole_model,
)
from .taskgen import generate_dataset, export_dataset, split_classes

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CHECK = 2


class _Parser(argparse.ArgumentParser):
    """argparse with the validation-error exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cwtseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None,
                       help="JSON config file layered over the preset")
        p.add_argument("--preset", choices=PRESET_NAMES, default="toy")
        p.add_argument("--seed", type=int, default=None,
                       help="override run.seed")
        p.add_argument("--precision", choices=("f32", "f64"), default=None,
                       help="override run.precision")
        p.add_argument("--out", type=Path, default=Path("runs"),
                       help="artifact directory")

    def eval_flags(p):
        p.add_argument("--parallel-eval", action="store_true",
                       help="evaluate episodes concurrently (associative merge)")
        p.add_argument("--strict-deterministic", action="store_true",
                       help="force single-threaded evaluation")

    common(sub.add_parser("gen-data", help="write both domains' datasets"))

    common(sub.add_parser("pretrain",
                          help="stage 1: supervised training on base classes"))

    p = sub.add_parser("metatrain",
                       help="stage 2: episodic training of the weight adapter")
    common(p)
    p.add_argument("--backbone", type=Path, default=None,
                   help="stage-1 checkpoint (default: OUT/backbone.ckpt)")
    p.add_argument("--whole-model", action="store_true",
                   help="train the single-stage baseline instead (episodic "
                        "backbone updates, prototype classifier)")

    p = sub.add_parser("eval", help="meta-test on novel classes")
    common(p)
    eval_flags(p)
    p.add_argument("--mode", choices=ABLATION_MODES, default="full_cwt")
    p.add_argument("--cross-domain", action="store_true",
                   help="evaluate on the second domain's novel classes")
    p.add_argument("--backbone", type=Path, default=None,
                   help="backbone checkpoint (default: OUT/backbone.ckpt, or "
                        "OUT/backbone_whole.ckpt for --mode whole_model_meta)")
    p.add_argument("--cwt", type=Path, default=None,
                   help="adapter checkpoint (default: OUT/cwt.ckpt; unused by "
                        "classifier_only and whole_model_meta)")

    p = sub.add_parser("ablate",
                       help="run all four modes across seeds and compare")
    common(p)
    eval_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--corrupt", default=None, metavar="CHECK",
                   help="test hook: corrupt the named check's loss to prove "
                        "the harness reports failures")
    return parser


def _resolved(args) -> tuple[dict, object]:
    overrides: dict = {}
    if args.seed is not None:
        overrides.setdefault("run", {})["seed"] = args.seed
    if args.precision is not None:
        overrides.setdefault("run", {})["precision"] = args.precision
    cfg = resolve(args.preset, args.config, overrides)
    return cfg, to_objects(cfg)


def _workers(args) -> int:
    if getattr(args, "strict_deterministic", False):
        return 1
    if not getattr(args, "parallel_eval", False):
        return 1
    env = os.environ.get("CWT_THREADS")
    if env is None:
        return max(1, os.cpu_count() or 1)
    try:
        return max(1, int(env))
    except ValueError:
        raise ConfigError(f"CWT_THREADS must be an integer, got {env!r}")


def _write_config(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    reports.write_json(out / "resolved_config.json", cfg)


def cmd_gen_data(args) -> int:
    cfg, objs = _resolved(args)
    _write_config(args.out, cfg)
    for spec in (objs.dataset, objs.dataset_b):
        path = export_dataset(generate_dataset(spec), args.out / spec.domain)
        print(f"{spec.domain}: {spec.num_classes} classes x "
              f"{spec.images_per_class} images ({spec.image_size}px) -> {path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg, objs = _resolved(args)
    _write_config(args.out, cfg)
    base, novel = split_classes(generate_dataset(objs.dataset), objs.split)
    print(f"pre-training on base classes {list(base.class_ids)} "
          f"(novel: {list(novel.class_ids)})")
    result = pretrain(base, objs.pretrain, feature_dim=objs.feature_dim,
                      dtype=objs.dtype)
    for epoch, loss in enumerate(result.epoch_losses):
        print(f"epoch {epoch:3d}  loss {loss:.4f}")
    ckpt = save_backbone(args.out / "backbone.ckpt", result.params, config=cfg)
    reports.write_curves_csv(args.out / "pretrain_curves.csv",
                             result.epoch_losses)
    print(f"backbone checkpoint -> {ckpt}")
    return EXIT_OK


def cmd_metatrain(args) -> int:
    cfg, objs = _resolved(args)
    _write_config(args.out, cfg)
    backbone_path = args.backbone or args.out / "backbone.ckpt"
    params, manifest = load_backbone(backbone_path)
    if params.feature_dim != objs.feature_dim:
        raise ConfigError(
            f"backbone feature width {params.feature_dim} does not match "
            f"model.feature_dim {objs.feature_dim}")
    base, _ = split_classes(generate_dataset(objs.dataset), objs.split)

    if args.whole_model:
        trained, log = meta_train_whole_model(params.clone(), base, objs.meta)
        ckpt = save_backbone(args.out / "backbone_whole.ckpt", freeze(trained),
                             config=cfg)
        reports.write_curves_csv(args.out / "whole_model_curves.csv",
                                 log["episode_losses"])
        print(f"single-stage baseline checkpoint -> {ckpt}")
        return EXIT_OK

    frozen = freeze(params)
    cwt = init_cwt(objs.feature_dim, objs.attn_dim, objs.num_heads,
                   seed=objs.seed, dropout_rate=objs.dropout_rate,
                   use_layer_norm=objs.use_layer_norm,
                   shared_qkv=objs.shared_qkv, scale_mode=objs.scale_mode,
                   dtype=objs.dtype)
    cwt, log = meta_train(frozen, base, cwt, objs.meta)
    losses = log["episode_losses"]
    print(f"{len(losses)} episodes; first-100 mean loss "
          f"{sum(losses[:100]) / min(100, len(losses)):.4f}, last-100 mean "
          f"{sum(losses[-100:]) / min(100, len(losses)):.4f}")
    ckpt = save_cwt(args.out / "cwt.ckpt", cwt, config=cfg,
                    backbone_hash=hash_tensors(frozen.tensors()))
    reports.write_curves_csv(args.out / "metatrain_curves.csv", losses)
    print(f"adapter checkpoint -> {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, objs = _resolved(args)
    default_backbone = ("backbone_whole.ckpt"
                        if args.mode == "whole_model_meta" else "backbone.ckpt")
    backbone_path = args.backbone or args.out / default_backbone
    params, _ = load_backbone(backbone_path)
    params = freeze(params)
    cwt = None
    if args.mode in ("full_cwt", "attend_support"):
        cwt, _ = load_cwt(args.cwt or args.out / "cwt.ckpt")

    base, novel_a = split_classes(generate_dataset(objs.dataset), objs.split)
    workers = _workers(args)
    if args.cross_domain:
        _, novel = split_classes(generate_dataset(objs.dataset_b), objs.split)
        report = cross_domain_eval(params, cwt, novel, objs.protocol,
                                   mode=args.mode, workers=workers)
    else:
        report = meta_test(params, cwt, novel_a, objs.protocol, mode=args.mode,
                           train_class_ids=base.class_ids, workers=workers)

    suffix = "_xdomain" if args.cross_domain else ""
    out = args.out / f"eval_{args.mode}{suffix}"
    cfg_out = dict(cfg)
    cfg_out["fingerprint"] = config_fingerprint(cfg)
    paths = reports.write_report_bundle(out, report, cfg_out)
    print(f"mode {args.mode}{' cross-domain' if args.cross_domain else ''}: "
          f"mean mIoU {report.mean_miou:.4f} +/- {report.ci95_miou:.4f} "
          f"over {objs.protocol.trials} trials "
          f"x {objs.protocol.episodes_per_trial} episodes ({workers} workers)")
    print(f"report bundle -> {paths['results'].parent}")
    if not report.hash_audit_passed:
        print("parameter hash audit FAILED: weights changed during evaluation",
              file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def _ablation_seed_results(objs, base, novel, seed: int,
                           workers: int) -> dict[str, float]:
    """Full pipeline for one seed: stage 1, three stage-2 variants, four evals."""
    inner = dataclasses.replace(objs.inner, seed=seed)
    stage1 = pretrain(base, dataclasses.replace(objs.pretrain, seed=seed),
                      feature_dim=objs.feature_dim, dtype=objs.dtype)
    frozen = freeze(stage1.params)

    def adapter(attend_to: str):
        cwt = init_cwt(objs.feature_dim, objs.attn_dim, objs.num_heads,
                       seed=seed, dropout_rate=objs.dropout_rate,
                       use_layer_norm=objs.use_layer_norm,
                       shared_qkv=objs.shared_qkv, scale_mode=objs.scale_mode,
                       dtype=objs.dtype)
        cfg = dataclasses.replace(objs.meta, seed=seed, inner=inner,
                                  attend_to=attend_to)
        return meta_train(frozen, base, cwt, cfg)[0]

    cwt_query = adapter("query")
    cwt_support = adapter("support")
    whole, _ = meta_train_whole_model(
        stage1.params.clone(),
        base, dataclasses.replace(objs.meta, seed=seed, inner=inner))
    whole = freeze(whole)

    protocol = dataclasses.replace(objs.protocol, seed_base=seed * 1000 + 17,
                                   inner=inner)

    def run(backbone, cwt, mode):
        return meta_test(backbone, cwt, novel, protocol, mode=mode,
                         train_class_ids=base.class_ids,
                         workers=workers).mean_miou

    return {
        "full_cwt": run(frozen, cwt_query, "full_cwt"),
        "classifier_only": run(frozen, None, "classifier_only"),
        "whole_model_meta": run(whole, None, "whole_model_meta"),
        "attend_support": run(frozen, cwt_support, "attend_support"),
    }


def cmd_ablate(args) -> int:
    cfg, objs = _resolved(args)
    _write_config(args.out, cfg)
    base, novel = split_classes(generate_dataset(objs.dataset), objs.split)
    workers = _workers(args)
    seeds = [objs.seed + i for i in range(objs.num_ablation_seeds)]
    per_mode: dict[str, list[float]] = {m: [] for m in ABLATION_MODES}
    for seed in seeds:
        result = _ablation_seed_results(objs, base, novel, seed, workers)
        for mode in ABLATION_MODES:
            per_mode[mode].append(result[mode])
        print(f"seed {seed}: " + "  ".join(
            f"{m}={result[m]:.4f}" for m in ABLATION_MODES))

    paths = reports.write_ablation_table(args.out, per_mode)
    print(f"\n{'mode':18s}" + "".join(f"  seed{s:<4d}" for s in seeds)
          + "  mean+/-std")
    for mode in ABLATION_MODES:
        vals = per_mode[mode]
        print(f"{mode:18s}" + "".join(f"  {v:.4f}  " for v in vals)
              + f"  {np.mean(vals):.4f}+/-{np.std(vals):.4f}")
    verdicts = json.loads(Path(paths["verdicts"]).read_text())
    for key, v in sorted(verdicts.items()):
        print(f"{key}: holds in mean {v['holds_mean']}, "
              f"wins {v['seed_wins']}/{v['num_seeds']} seeds")
    print(f"ablation artifacts -> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = run_checks(corrupt=args.corrupt)
    width = max(len(name) for name in registry())
    print(f"{'check':{width}s}  max_rel_err   verdict  (tolerance {TOLERANCE:g})")
    for row in rows:
        print(f"{row['check']:{width}s}  {row['max_rel_err']:.4e}   "
              f"{'PASS' if row['passed'] else 'FAIL'}")
    failed = [r for r in rows if not r["passed"]]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "metatrain": cmd_metatrain,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, OSError, ValueError) as err:
        print(f"cwtseg {args.command}: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as err:
        print(f"cwtseg {args.command}: {err}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
