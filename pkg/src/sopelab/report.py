"""Aggregate run directories into summary CSVs.

A run directory is what :func:`sopelab.driver.write_run_dir` produces. A
sweep directory holds one sub-directory per grid value, named
``<param>=<value>``, each containing one run directory per seed.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import DependencyError, FormatError


def read_csv(path):
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_run(run_dir):
    run_dir = Path(run_dir)
    return {
        "metrics": read_csv(run_dir / "metrics.csv"),
        "phases": read_csv(run_dir / "phases.csv"),
        "flops": read_csv(run_dir / "flops.csv"),
        "summary": json.loads((run_dir / "summary.json").read_text()),
    }


def find_runs(root):
    """Every directory under ``root`` (inclusive) that contains a metrics.csv."""
    root = Path(root)
    return sorted(p.parent for p in root.rglob("metrics.csv"))


def _stats(values):
    arr = np.asarray(values, float)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def score_curve(runs):
    """Rows ``(env_step, n_runs, mean, std)`` for returns and scores at every shared eval point."""
    steps = [tuple(int(r["env_step"]) for r in run["metrics"]) for run in runs]
    if len(set(steps)) != 1:
        raise FormatError("runs do not share the same evaluation points")
    rows = []
    for i, step in enumerate(steps[0]):
        ret = _stats([float(run["metrics"][i]["mean_return"]) for run in runs])
        score = _stats([float(run["metrics"][i]["normalized_score"]) for run in runs])
        upd = _stats([float(run["metrics"][i]["cum_grad_updates"]) for run in runs])
        rows.append((step, len(runs), *score, *ret, *upd))
    return rows


def flops_curve(runs):
    steps = [tuple(int(r["env_step"]) for r in run["flops"]) for run in runs]
    if len(set(steps)) != 1:
        raise FormatError("runs do not share the same FLOP checkpoints")
    rows = []
    for i, step in enumerate(steps[0]):
        total = [float(run["flops"][i]["cum_forward_flops"]) + float(run["flops"][i]["cum_backward_flops"])
                 for run in runs]
        rows.append((step, len(runs), *_stats(total)))
    return rows


def phase_curve(runs):
    """Mean stabilization length per phase index (the updates-per-phase profile)."""
    by_phase = {}
    for run in runs:
        for p in run["phases"]:
            key = (int(p["phase_index"]), int(p["start_env_step"]))
            by_phase.setdefault(key, []).append(float(p["updates_in_phase"]))
    return [(idx, start, len(v), *_stats(v)) for (idx, start), v in sorted(by_phase.items())]


def aggregate(run_dirs, out_dir):
    """Write scores.csv, flops_curve.csv and phase_updates.csv for a set of seed runs."""
    if not run_dirs:
        raise DependencyError("no run directories to aggregate")
    runs = [load_run(d) for d in run_dirs]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "scores.csv", ["env_step", "n_runs", "mean_score", "std_score", "mean_return", "std_return",
                                "mean_grad_updates", "std_grad_updates"], score_curve(runs))
    _write(out / "flops_curve.csv", ["env_step", "n_runs", "mean_cum_flops", "std_cum_flops"], flops_curve(runs))
    _write(out / "phase_updates.csv", ["phase_index", "start_env_step", "n_runs", "mean_updates", "std_updates"],
           phase_curve(runs))
    return out


def final_scores(run_dirs, window=None):
    """Final (or trailing-window mean) normalized score of each run."""
    out = []
    for d in run_dirs:
        summary = json.loads((Path(d) / "summary.json").read_text())
        out.append(summary["window_score"] if window else summary["final_score"])
    return out


def compare_sweep(sweep_dir, out_path=None):
    """One row per grid value plus long-format curves; returns the summary rows."""
    sweep_dir = Path(sweep_dir)
    groups = sorted((p for p in sweep_dir.iterdir() if p.is_dir() and "=" in p.name),
                    key=lambda p: _sort_key(p.name.split("=", 1)[1]))
    if not groups:
        raise DependencyError(f"no <param>=<value> directories under {sweep_dir}")
    rows, curves = [], []
    for group in groups:
        param, value = group.name.split("=", 1)
        runs = find_runs(group)
        loaded = [load_run(r) for r in runs]
        final = _stats([run["summary"]["final_score"] for run in loaded])
        window = _stats([run["summary"]["window_score"] for run in loaded])
        updates = _stats([run["summary"]["grad_updates"] for run in loaded])
        flops = _stats([run["summary"]["total_flops"] for run in loaded])
        rows.append((param, value, len(runs), *final, *window, *updates, *flops))
        for step, n, mean, std, *_ in score_curve(loaded):
            curves.append((param, value, step, n, mean, std))
    out_path = Path(out_path) if out_path else sweep_dir / "comparison.csv"
    _write(out_path, ["param", "value", "n_seeds", "mean_final_score", "std_final_score", "mean_window_score",
                      "std_window_score", "mean_grad_updates", "std_grad_updates", "mean_total_flops",
                      "std_total_flops"], rows)
    _write(out_path.with_name("curves.csv"), ["param", "value", "env_step", "n_seeds", "mean_score", "std_score"],
           curves)
    return rows


def _sort_key(text):
    try:
        return (0, float(text), text)
    except ValueError:
        return (1, 0.0, text)
