"""Desk-scale experiment settings and a source-keyed run cache for the acceptance suite.

Long runs are cached under ``$SOPE_ACCEPT_CACHE`` (default
``<repo>/.acceptance_cache``). A cache entry is keyed by the run config and
a hash of every module that can influence a run, so editing the library
invalidates stale results instead of silently reusing them.

``python tests/desk_scale.py`` fills the cache for criteria 7-9 ahead of
time; the acceptance tests compute anything that is missing themselves.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import sopelab
from sopelab import data, envlab
from sopelab.config import ScheduleConfig
from sopelab.driver import run

REPO = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("SOPE_ACCEPT_CACHE", REPO / ".acceptance_cache"))
RUN_MODULES = ("numerics", "envlab", "replay", "agent", "opestop", "accounting", "config", "driver", "data")

SEEDS = (0, 1, 2, 3, 4)
PATIENCES = (1, 3, 5, 10, 20)
N_FIX_VALUES = (1000, 2500, 5000, 7500)

# network width, precision and batch are reduced from the library defaults so
# that the 1M-update rlpd_lite runs fit on one CPU; everything else is default
DESK = dict(env="pendulum", tier="expert", total_steps=50_000, hidden=(64, 64), batch_size=64,
            dtype="float32")
BOOTSTRAP = data.BootstrapConfig(env="pendulum", steps=data.DEFAULT_BOOTSTRAP_STEPS["pendulum-swingup"])


def source_hash():
    h = hashlib.sha256()
    pkg = Path(sopelab.__file__).parent
    for name in RUN_MODULES:
        h.update((pkg / f"{name}.py").read_bytes())
    return h.hexdigest()[:16]


def data_dir():
    """Bootstrap checkpoints, anchors and tier datasets for pendulum (built once per source hash)."""
    root = CACHE / f"data-{source_hash()}"
    env = root / "pendulum-swingup"
    if not (env / "expert.sopd").exists():
        data.bootstrap(BOOTSTRAP, root)
        data.generate_all("pendulum", data.DEFAULT_DATASET_SIZE, 0, root)
    return root


def desk_config(schedule, seed, **overrides):
    return ScheduleConfig(schedule=schedule, seed=seed, data_dir=str(data_dir()), **{**DESK, **overrides})


def cached_run(cfg):
    """Summary dict of ``cfg``'s run, executing it only when no cache entry exists."""
    text = cfg.replace(data_dir=None).to_text()
    key = hashlib.sha256((source_hash() + text).encode()).hexdigest()[:20]
    out = CACHE / "runs" / key
    summary = out / "summary.json"
    if not summary.exists():
        run(cfg, out_dir=out.with_suffix(".tmp"))
        out.with_suffix(".tmp").rename(out)
    result = json.loads(summary.read_text())
    result["dir"] = str(out)
    return result


def efficiency_runs():
    return {kind: [cached_run(desk_config(kind, s)) for s in SEEDS] for kind in ("sope", "sacfd", "rlpd_lite")}


def patience_runs():
    return {p: [cached_run(desk_config("sope", s, patience=p)) for s in SEEDS] for p in PATIENCES}


def n_fix_runs():
    return {n: [cached_run(desk_config("speq_fixed", s, n_fix=n)) for s in SEEDS] for n in N_FIX_VALUES}


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    which = sys.argv[1:] or ["efficiency", "patience", "n_fix"]
    logging.info("data dir %s", data_dir())
    for name in which:
        results = {"efficiency": efficiency_runs, "patience": patience_runs, "n_fix": n_fix_runs}[name]()
        for k, runs in results.items():
            logging.info("%s %s final %s", name, k, [round(r["final_score"], 1) for r in runs])
