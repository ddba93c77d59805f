"""Command-line entry point: ``malloc-bench <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench
from .backbone import ModelConfig, load_checkpoint, save_checkpoint
from .data import load_csv, save_csv, split_temporal, synth_generate
from .metrics import auc, gauc, logloss
from .numerics import Rng
from .policies import PolicyConfig, POLICIES
from .resources import measure
from .training import TrainingDiverged, TrainSettings, evaluate, train

CSV_HELP = (
    "CSV reports hold one row per scenario and seed, columns in this order: "
    + ", ".join(bench.CSV_COLUMNS)
    + ". Empty cells mean the value is absent (failed or diverged scenarios)."
)


def _param_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _policy_params(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise SystemExit(f"policy flag must look like key=value, got {pair!r}")
        out[key] = _param_value(value)
    return out


def _depths(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"depths must be comma-separated integers, got {text!r}")


def cmd_gen_data(a) -> int:
    ds = synth_generate(a.users, a.items, a.seq_len, a.topics, a.period, Rng(a.seed))
    save_csv(ds, a.out)
    print(f"wrote {ds.n_interactions} interactions for {ds.n_users} users to {a.out}")
    return 0


def cmd_train(a) -> int:
    cfg = json.loads(Path(a.config).read_text())
    model = dict(cfg.get("model", {}))
    ds = load_csv(a.data, model.get("max_seq_len", 128))
    train_ds, _ = split_temporal(ds, cfg.get("test_fraction", 0.1))
    config = ModelConfig(**model, n_items=ds.n_items)
    settings = TrainSettings(epochs=cfg.get("epochs", 3), lr=cfg.get("lr", 5e-4), batch_size=cfg.get("train_batch", 2))
    seed = cfg.get("seed", cfg.get("seeds", [1])[0])
    history: list[float] = []
    try:
        params = train(train_ds, config, settings, Rng(seed), history=history)
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 2
    save_checkpoint(a.out, params, config)
    print(f"epoch losses: {', '.join(f'{x:.5f}' for x in history)}; checkpoint written to {a.out}")
    return 0


def cmd_eval(a) -> int:
    params, config = load_checkpoint(a.ckpt)
    ds = load_csv(a.data, config.max_seq_len)
    if ds.n_items != config.n_items:
        raise SystemExit(f"{a.data} has {ds.n_items} items but the checkpoint was trained on {config.n_items}")
    _, test_ds = split_temporal(ds, a.test_fraction)
    policy = PolicyConfig(a.policy, _policy_params(a.param))
    imps = evaluate(params, config, test_ds, policy, seed=a.seed)
    res = measure(params, config, policy, batch=a.batch, seed=a.seed)
    report = {
        "schema": bench.SCHEMA, "policy": policy.to_dict(),
        "auc": auc(imps), "gauc": gauc(imps), "logloss": logloss(imps), **res.to_dict(),
    }
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if a.report:
        Path(a.report).write_text(text)
    print(text, end="")
    return 0


def cmd_bench(a) -> int:
    _, specs = bench.load_config(a.config)
    report = bench.run_benchmark(specs, a.workers, timings=a.timings)
    bench.emit_report(report, a.format, a.out)
    n_bad = sum(r["status"] != "ok" for r in report.rows)
    print(f"{len(report.rows)} scenarios ({n_bad} failed or diverged); report written to {a.out}")
    return 0


def cmd_sweep(a) -> int:
    _, specs = bench.load_config(a.config)
    report = bench.depth_sweep(specs, a.depths, a.workers)
    bench.emit_report(report, a.format, a.out)
    for r in report.rows:
        status = "diverged" if r["diverged"] else r["status"]
        gauc_txt = "-" if r["gauc"] is None else f"{r['gauc']:.4f}"
        print(f"blocks={r['n_blocks']:<3} {r['policy']:<24} seed={r['seed']} {status:<8} gauc={gauc_txt}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="malloc-bench", description="KV-cache policy benchmark for generative recommenders.",
                                epilog=CSV_HELP)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic interaction CSV")
    g.add_argument("--users", type=int, default=1000)
    g.add_argument("--items", type=int, default=200)
    g.add_argument("--seq-len", type=int, default=128)
    g.add_argument("--topics", type=int, default=10)
    g.add_argument("--period", type=int, default=8)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the backbone and write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--config", required=True, help="JSON with model, epochs, lr, seed, train_batch")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score the held-out split under one cache policy")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--policy", default="native", choices=sorted(POLICIES))
    e.add_argument("-p", "--param", action="append", metavar="KEY=VALUE", help="policy parameter, repeatable")
    e.add_argument("--batch", type=int, default=8)
    e.add_argument("--seed", type=int, default=1)
    e.add_argument("--test-fraction", type=float, default=0.1)
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="run a policy x seed scenario matrix", epilog=CSV_HELP)
    b.add_argument("--config", required=True)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--format", choices=("json", "csv"), default="json")
    b.add_argument("--out", required=True)
    b.add_argument("--timings", action="store_true", help="add wall_seconds per scenario (breaks byte-identity)")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", help="run the config's scenarios at several depths", epilog=CSV_HELP)
    s.add_argument("--config", required=True)
    s.add_argument("--depths", type=_depths, default=[1, 2, 4, 8, 16, 32])
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--format", choices=("json", "csv"), default="json")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
