"""Report bundle: results.json, summary.csv, curves.csv,
resolved_config.json, and small self-contained SVG charts.

All writers are deterministic — same inputs give byte-identical files —
so artifact diffs double as regression checks.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .meta import EvalReport

__all__ = [
    "write_json",
    "write_results",
    "write_summary_csv",
    "write_curves_csv",
    "write_report_bundle",
    "render_curve_svg",
    "render_bars_svg",
    "write_ablation_table",
    "summary_matches_results",
]


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
    return path


def write_results(path: str | Path, report: EvalReport) -> Path:
    return write_json(path, report.to_dict())


def _csv_text(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def write_summary_csv(path: str | Path, report: EvalReport) -> Path:
    rows: list[list] = [["trial", "miou"]]
    for i, v in enumerate(report.per_trial_miou):
        rows.append([i, repr(v)])
    rows.append(["mean", repr(report.mean_miou)])
    rows.append(["std", repr(report.std_miou)])
    rows.append(["ci95", repr(report.ci95_miou)])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_csv_text(rows))
    return path


def write_curves_csv(path: str | Path, losses: Sequence[float],
                     value_name: str = "loss") -> Path:
    rows: list[list] = [["step", value_name]]
    rows.extend([i, repr(float(v))] for i, v in enumerate(losses))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_csv_text(rows))
    return path


def summary_matches_results(summary_path: str | Path,
                            results_path: str | Path,
                            tol: float = 1e-9) -> bool:
    """The bundle invariant: summary.csv means recompute from results.json."""
    results = json.loads(Path(results_path).read_text())
    with open(summary_path, newline="") as f:
        rows = {r[0]: r[1] for r in csv.reader(f) if r}
    per_trial = [float(rows[str(i)]) for i in range(len(results["per_trial_miou"]))]
    checks = [
        abs(float(rows["mean"]) - float(np.mean(per_trial))) <= tol,
        abs(float(rows["mean"]) - results["mean_miou"]) <= tol,
    ]
    recomputed = []
    by_trial: dict[int, list[dict]] = {}
    for rec in results["records"]:
        by_trial.setdefault(rec["trial"], []).append(rec)
    from .meta import miou
    for t in sorted(by_trial):
        recomputed.append(miou(by_trial[t],
                               results["config_fingerprint"]["include_background"]))
    checks.append(all(abs(a - b) <= tol for a, b in zip(recomputed, per_trial)))
    return all(checks)


# -- SVG charts ------------------------------------------------------------------

_W, _H, _PAD = 640, 360, 48


def _frame(title: str, body: str) -> str:
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">\n'
        f'<rect width="{_W}" height="{_H}" fill="white"/>\n'
        f'<text x="{_W / 2:g}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="15">{title}</text>\n'
        f'<rect x="{_PAD}" y="{_PAD}" width="{_W - 2 * _PAD}" height="{_H - 2 * _PAD}" '
        f'fill="none" stroke="#333"/>\n'
        f"{body}</svg>\n"
    )


def render_curve_svg(values: Sequence[float], title: str = "loss") -> str:
    vals = [float(v) for v in values]
    if not vals:
        return _frame(title, "")
    lo, hi = min(vals), max(vals)
    span = (hi - lo) or 1.0
    inner_w, inner_h = _W - 2 * _PAD, _H - 2 * _PAD
    pts = []
    for i, v in enumerate(vals):
        x = _PAD + (inner_w * i / max(len(vals) - 1, 1))
        y = _PAD + inner_h * (1.0 - (v - lo) / span)
        pts.append(f"{x:.2f},{y:.2f}")
    labels = (
        f'<text x="{_PAD - 6}" y="{_PAD + 10}" text-anchor="end" '
        f'font-family="sans-serif" font-size="11">{hi:.4g}</text>\n'
        f'<text x="{_PAD - 6}" y="{_H - _PAD}" text-anchor="end" '
        f'font-family="sans-serif" font-size="11">{lo:.4g}</text>\n'
    )
    body = (labels + f'<polyline points="{" ".join(pts)}" fill="none" '
                     f'stroke="#1565c0" stroke-width="1.5"/>\n')
    return _frame(title, body)


def render_bars_svg(labels: Sequence[str], values: Sequence[float],
                    title: str = "mIoU by mode") -> str:
    if len(labels) != len(values):
        raise ValueError("labels and values must pair up")
    inner_w, inner_h = _W - 2 * _PAD, _H - 2 * _PAD
    hi = max([float(v) for v in values] + [1e-9])
    n = len(values)
    body = ""
    for i, (label, v) in enumerate(zip(labels, values)):
        v = float(v)
        bw = inner_w / n * 0.6
        x = _PAD + inner_w * (i + 0.2) / n
        h = inner_h * v / hi
        y = _H - _PAD - h
        body += (
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{bw:.2f}" height="{h:.2f}" '
            f'fill="#2e7d32"/>\n'
            f'<text x="{x + bw / 2:.2f}" y="{_H - _PAD + 16}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{label}</text>\n'
            f'<text x="{x + bw / 2:.2f}" y="{y - 4:.2f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{v:.3f}</text>\n'
        )
    return _frame(title, body)


def write_report_bundle(out_dir: str | Path, report: EvalReport,
                        resolved_config: Mapping,
                        curves: Sequence[float] | None = None) -> dict[str, Path]:
    """Write the full artifact set for one evaluation run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "results": write_results(out / "results.json", report),
        "summary": write_summary_csv(out / "summary.csv", report),
        "config": write_json(out / "resolved_config.json", dict(resolved_config)),
    }
    if curves is not None:
        paths["curves"] = write_curves_csv(out / "curves.csv", curves)
        svg = out / "curves.svg"
        svg.write_text(render_curve_svg(curves, title="outer-loop query loss"))
        paths["curves_svg"] = svg
    bars = out / "miou.svg"
    bars.write_text(render_bars_svg(
        [f"trial {i}" for i in range(len(report.per_trial_miou))]
        + ["mean"],
        list(report.per_trial_miou) + [report.mean_miou],
        title=f"{report.mode} mIoU"))
    paths["miou_svg"] = bars
    return paths


def write_ablation_table(out_dir: str | Path, per_mode_per_seed: Mapping[str, Sequence[float]],
                         orderings: Sequence[tuple[str, str]] = (
                             ("full_cwt", "classifier_only"),
                             ("full_cwt", "whole_model_meta"),
                             ("full_cwt", "attend_support"),
                         )) -> dict[str, Path]:
    """Mode x seed mIoU matrix with mean/std columns plus ordering verdicts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    modes = list(per_mode_per_seed)
    n_seeds = len(next(iter(per_mode_per_seed.values())))
    for mode, vals in per_mode_per_seed.items():
        if len(vals) != n_seeds:
            raise ValueError(f"mode {mode!r} has {len(vals)} seeds, expected {n_seeds}")
    rows: list[list] = [["mode"] + [f"seed{i}" for i in range(n_seeds)] + ["mean", "std"]]
    for mode in modes:
        vals = [float(v) for v in per_mode_per_seed[mode]]
        rows.append([mode] + [repr(v) for v in vals]
                    + [repr(float(np.mean(vals))), repr(float(np.std(vals)))])
    table = out / "ablation.csv"
    table.write_text(_csv_text(rows))

    verdicts = {}
    for hi_mode, lo_mode in orderings:
        if hi_mode in per_mode_per_seed and lo_mode in per_mode_per_seed:
            a = [float(v) for v in per_mode_per_seed[hi_mode]]
            b = [float(v) for v in per_mode_per_seed[lo_mode]]
            wins = sum(x > y for x, y in zip(a, b))
            verdicts[f"{hi_mode}>{lo_mode}"] = {
                "holds_mean": float(np.mean(a)) > float(np.mean(b)),
                "seed_wins": wins,
                "num_seeds": n_seeds,
            }
    verdict_path = write_json(out / "verdicts.json", verdicts)
    bars = out / "ablation.svg"
    bars.write_text(render_bars_svg(
        modes, [float(np.mean(per_mode_per_seed[m])) for m in modes],
        title="mean mIoU by mode"))
    return {"table": table, "verdicts": verdict_path, "svg": bars}
