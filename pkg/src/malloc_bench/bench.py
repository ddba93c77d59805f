"""Scenario matrix runner: train, evaluate under a cache policy, measure, compare.

Results are keyed by scenario index and merged in input order, so a report
depends only on the specs, never on worker count or completion order.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .backbone import ModelConfig
from .data import Dataset, load_csv, split_temporal, synth_generate
from .metrics import auc, gauc, logloss
from .numerics import Rng
from .policies import LEVELS, PolicyConfig
from .resources import measure
from .training import TrainingDiverged, TrainSettings, evaluate, train

log = logging.getLogger(__name__)

SCHEMA = "malloc_bench_v1"
DEFAULT_SEEDS = (1, 2, 3)
CSV_COLUMNS = [
    "scenario", "policy", "level", "seed", "n_blocks", "status", "diverged",
    "auc", "gauc", "logloss",
    "macs_measured", "macs_formula", "kv_peak_bytes", "overhead_bytes", "mode", "batch", "cached_len",
    "pareto", "error",
]
_MEAN_FIELDS = ("auc", "gauc", "logloss", "macs_measured", "kv_peak_bytes", "overhead_bytes")


@dataclass(frozen=True)
class ScenarioSpec:
    """One (dataset, model, policy, seed) cell of the experiment matrix.

    ``dataset`` is ``{"path": csv}`` or ``{"synthetic": {...generator args}}``;
    ``model`` holds ModelConfig fields except ``n_items``, which comes from
    the data.
    """

    dataset: dict
    model: dict
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    epochs: int = 3
    seed: int = 1
    batch: int = 8
    lr: float = 5e-4
    train_batch: int = 2
    test_fraction: float = 0.1
    cached_len: int | None = None

    def with_blocks(self, n_blocks: int) -> "ScenarioSpec":
        return replace(self, model={**self.model, "n_blocks": n_blocks})


@dataclass
class BenchReport:
    rows: list[dict] = field(default_factory=list)
    aggregate: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"schema": SCHEMA, "scenarios": self.rows, "aggregate": self.aggregate}


# -- datasets and trained models are memoised per process; both are deterministic

_DATASETS: dict[str, Dataset] = {}
_MODELS: dict[str, object] = {}


def _key(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def load_dataset(ref: dict, max_seq_len: int) -> Dataset:
    key = _key([ref, max_seq_len])
    if key not in _DATASETS:
        if "path" in ref:
            ds = load_csv(ref["path"], max_seq_len)
        elif "synthetic" in ref:
            a = dict(ref["synthetic"])
            ds = synth_generate(
                a.get("users", 1000), a.get("items", 200), min(a.get("seq_len", max_seq_len), max_seq_len),
                a.get("topics", 10), a.get("period", 8), Rng(a.get("seed", 1)),
            )
        else:
            raise ValueError(f"dataset reference needs 'path' or 'synthetic': {ref}")
        _DATASETS[key] = ds
    return _DATASETS[key]


def _trained(spec: ScenarioSpec, train_ds: Dataset, config: ModelConfig):
    key = _key([spec.dataset, spec.model, spec.epochs, spec.seed, spec.lr, spec.train_batch, spec.test_fraction])
    if key not in _MODELS:
        settings = TrainSettings(epochs=spec.epochs, lr=spec.lr, batch_size=spec.train_batch)
        try:
            _MODELS[key] = train(train_ds, config, settings, Rng(spec.seed))
        except TrainingDiverged as e:
            _MODELS[key] = e
    return _MODELS[key]


def run_scenario(spec: ScenarioSpec, index: int = 0, timings: bool = False) -> dict:
    """Train (memoised), evaluate under the policy and measure resources. Never raises."""
    t0 = time.perf_counter()
    row = {
        "scenario": index, "policy": spec.policy.label, "level": LEVELS[spec.policy.name],
        "params": spec.policy.params, "seed": spec.seed, "n_blocks": spec.model.get("n_blocks", 8),
        "status": "ok", "diverged": False, "error": None,
        "auc": None, "gauc": None, "logloss": None,
        "macs_measured": None, "macs_formula": None, "kv_peak_bytes": None, "overhead_bytes": None,
        "mode": spec.policy.mode, "batch": spec.batch, "cached_len": None,
    }
    try:
        ds = load_dataset(spec.dataset, spec.model.get("max_seq_len", 128))
        config = ModelConfig(**spec.model, n_items=ds.n_items)
        train_ds, test_ds = split_temporal(ds, spec.test_fraction)
        params = _trained(spec, train_ds, config)
        if isinstance(params, TrainingDiverged):
            row.update(status="diverged", diverged=True, error=str(params))
        else:
            imps = evaluate(params, config, test_ds, spec.policy, seed=spec.seed)
            row.update(auc=auc(imps), gauc=gauc(imps), logloss=logloss(imps))
            res = measure(params, config, spec.policy, cached_len=spec.cached_len, batch=spec.batch, seed=spec.seed)
            row.update(res.to_dict())
    except Exception as e:  # a failed scenario is a result row, not an abort
        row.update(status="failed", error=f"{type(e).__name__}: {e}")
    if timings:
        row["wall_seconds"] = time.perf_counter() - t0
    return row


def _run_indexed(args):
    return run_scenario(*args)


def aggregate_rows(rows: list[dict]) -> list[dict]:
    """Mean over seeds for each (policy, depth); Pareto flag on the means."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["policy"], r["n_blocks"]), []).append(r)
    out = []
    for (policy, depth), members in groups.items():
        ok = [r for r in members if r["status"] == "ok"]
        agg = {
            "policy": policy, "level": members[0]["level"], "n_blocks": depth, "mode": members[0]["mode"],
            "seeds": [r["seed"] for r in members], "n_ok": len(ok),
            "n_diverged": sum(r["diverged"] for r in members),
            "n_failed": sum(r["status"] == "failed" for r in members),
        }
        for f in _MEAN_FIELDS:
            agg[f] = float(np.mean([r[f] for r in ok])) if ok else None
        out.append(agg)
    scored = [a for a in out if a["n_ok"]]
    flags = pareto_frontier([(a["gauc"], a["macs_measured"], a["kv_peak_bytes"]) for a in scored])
    for a in out:
        a["pareto"] = False
    for a, f in zip(scored, flags):
        a["pareto"] = bool(f)
    return out


def run_benchmark(specs: list[ScenarioSpec], workers: int = 1, timings: bool = False) -> BenchReport:
    if not specs:
        raise ValueError("run_benchmark needs at least one scenario")
    jobs = [(s, i, timings) for i, s in enumerate(specs)]
    if workers <= 1:
        rows = [_run_indexed(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_indexed, jobs))
    rows.sort(key=lambda r: r["scenario"])
    _flag_rows(rows)
    return BenchReport(rows, aggregate_rows(rows))


def _flag_rows(rows: list[dict]) -> None:
    """Per-scenario Pareto flag, compared against the scenarios sharing its seed."""
    for r in rows:
        r["pareto"] = False
    for seed in sorted({r["seed"] for r in rows}):
        ok = [r for r in rows if r["seed"] == seed and r["status"] == "ok"]
        flags = pareto_frontier([(r["gauc"], r["macs_measured"], r["kv_peak_bytes"]) for r in ok])
        for r, f in zip(ok, flags):
            r["pareto"] = bool(f)


def pareto_frontier(points) -> list[bool]:
    """Non-dominated flags for (gauc up, macs down, bytes down); exact ties are all kept."""
    if len(points) == 0:
        return []
    P = np.asarray(points, dtype=np.float64)
    g, m, b = P[:, 0], P[:, 1], P[:, 2]
    no_worse = (g[None, :] >= g[:, None]) & (m[None, :] <= m[:, None]) & (b[None, :] <= b[:, None])
    better = (g[None, :] > g[:, None]) | (m[None, :] < m[:, None]) | (b[None, :] < b[:, None])
    dominated = (no_worse & better).any(axis=1)
    return [not x for x in dominated]


def depth_sweep(base: list[ScenarioSpec] | ScenarioSpec, depths: list[int], workers: int = 1) -> BenchReport:
    """Every base scenario at every depth; divergence is recorded per row."""
    if list(depths) != sorted(depths):
        raise ValueError(f"depths must be ascending, got {depths}")
    base = [base] if isinstance(base, ScenarioSpec) else list(base)
    specs = [s.with_blocks(d) for d in depths for s in base]
    return run_benchmark(specs, workers)


def specs_from_config(cfg: dict, base_dir: Path | str = ".") -> list[ScenarioSpec]:
    """Expand a bench config into scenarios: policies outer, seeds inner."""
    dataset = cfg["dataset"]
    if isinstance(dataset, str):
        dataset = {"path": dataset}
    if "path" in dataset:
        dataset = {"path": str((Path(base_dir) / dataset["path"]).resolve())}
    model = dict(cfg.get("model", {}))
    policies = [PolicyConfig.from_dict(p) for p in cfg.get("policies", [{"name": "native"}])]
    seeds = cfg.get("seeds", list(DEFAULT_SEEDS))
    common = dict(
        epochs=cfg.get("epochs", 3), batch=cfg.get("batch", 8), lr=cfg.get("lr", 5e-4),
        train_batch=cfg.get("train_batch", 2), test_fraction=cfg.get("test_fraction", 0.1),
        cached_len=cfg.get("cached_len"),
    )
    return [ScenarioSpec(dataset, model, p, seed=s, **common) for p in policies for s in seeds]


def load_config(path) -> tuple[dict, list[ScenarioSpec]]:
    path = Path(path)
    cfg = json.loads(path.read_text())
    return cfg, specs_from_config(cfg, path.parent)


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    return v


def emit_report(report: BenchReport, fmt: str, path) -> None:
    """Write JSON (sorted keys) or CSV (one row per scenario and seed)."""
    path = Path(path)
    try:
        if fmt == "json":
            path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
        elif fmt == "csv":
            with open(path, "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(CSV_COLUMNS)
                for r in report.rows:
                    w.writerow([_csv_value(r.get(c)) for c in CSV_COLUMNS])
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    except OSError as e:
        raise OSError(f"cannot write report to {path}: {e}") from e


def read_report(path) -> BenchReport:
    data = json.loads(Path(path).read_text())
    if data.get("schema") != SCHEMA:
        raise ValueError(f"{path}: not a {SCHEMA} report")
    return BenchReport(data["scenarios"], data["aggregate"])


def read_csv_report(path) -> list[dict]:
    ints = {"scenario", "seed", "n_blocks", "macs_measured", "macs_formula", "kv_peak_bytes", "overhead_bytes", "batch", "cached_len"}
    floats = {"auc", "gauc", "logloss"}
    out = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            row = {}
            for k, v in rec.items():
                if v == "":
                    row[k] = None
                elif k in ints:
                    row[k] = int(v)
                elif k in floats:
                    row[k] = float(v)
                elif k in ("diverged", "pareto"):
                    row[k] = v == "true"
                else:
                    row[k] = v
            out.append(row)
    return out


def is_finite_row(row: dict) -> bool:
    return all(row[k] is not None and math.isfinite(row[k]) for k in ("auc", "gauc", "logloss"))
