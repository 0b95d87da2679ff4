"""Command-line entry point: ``coopedge <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import uuid
from pathlib import Path

import numpy as np

from .checkpoints import load_model, save_model
from .experiments import (ExperimentConfig, ExperimentRecord, _coder_kwargs, ablate_dvib, append_record,
                          calibrate_delta0, config_hash, load_dataset, read_records, sweep, vib_config,
                          write_rate_relevance_csv)
from .metrics import estimate_rate_relevance, evaluate_accuracy
from .sim import ChannelModel
from .sr import SrConfig, SrModel, train_vddib_sr
from .vddib import VddibConfig, train_vddib
from .vib import train_vib

log = logging.getLogger("coopedge")


def _config(args) -> ExperimentConfig:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = ExperimentConfig.from_dict(raw)
    if args.data_dir:
        cfg = cfg.replace(**{"dataset.data_dir": args.data_dir})
    return cfg


def _features(vib_ckpts, views):
    extractors = [load_model(p) for p in vib_ckpts]
    if len(extractors) != len(views):
        raise SystemExit(f"expected {len(views)} extractor checkpoints, got {len(extractors)}")
    return [m.features(np.asarray(v).reshape(len(v), -1)) for m, v in zip(extractors, views)]


def cmd_ingest(args) -> int:
    cfg = _config(args)
    train, test, val = load_dataset(cfg.dataset)
    summary = {
        "source": cfg.dataset.source,
        "train": len(train), "test": len(test), "val": 0 if val is None else len(val),
        "K": train.K, "view_shapes": [list(v.shape[1:]) for v in train.views],
        "train_fingerprint": train.fingerprint(), "test_fingerprint": test.fingerprint(),
    }
    print(json.dumps(summary, indent=2))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "dataset.json").write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def cmd_train_vib(args) -> int:
    cfg = _config(args)
    train, _, _ = load_dataset(cfg.dataset)
    k = args.device_index
    if not 0 <= k < train.K:
        raise SystemExit(f"device index {k} out of range for K={train.K}")
    x = train.views[k].reshape(len(train), -1)
    model, trace = train_vib(x, train.labels, vib_config(cfg), k, train.num_classes)
    save_model(args.out, model, {"config_hash": config_hash(cfg), "final_loss": float(np.mean(trace[-100:]))})
    print(json.dumps({"checkpoint": str(args.out), "final_loss": float(np.mean(trace[-100:]))}))
    return 0


def cmd_train_vddib(args) -> int:
    cfg = _config(args)
    train, _, _ = load_dataset(cfg.dataset)
    z = _features(args.vib_ckpt, train.views)
    vcfg = VddibConfig(beta=cfg.beta, n=cfg.n, d=cfg.d, seed=cfg.seed, **_coder_kwargs(cfg, sr=False))
    model, trace = train_vddib(z, train.labels, vcfg, train.num_classes)
    save_model(args.out, model, {"config_hash": config_hash(cfg)})
    print(json.dumps({"checkpoint": str(args.out), "final_loss": float(np.mean(trace[-100:]))}))
    return 0


def cmd_train_vddib_sr(args) -> int:
    cfg = _config(args)
    train, _, val = load_dataset(cfg.dataset)
    z = _features(args.vib_ckpt, train.views)
    scfg = SrConfig(T=cfg.T, beta=cfg.beta, n=cfg.n, d_chunk=cfg.d, seed=cfg.seed,
                    delta0=cfg.delta0 if cfg.delta0 is not None else 0.0, **_coder_kwargs(cfg, sr=True))
    model, trace = train_vddib_sr(z, train.labels, scfg, train.num_classes)
    if cfg.calibrate_bits is not None:
        if val is None:
            raise SystemExit("calibrate_bits needs dataset.val_size > 0")
        model.cfg.delta0 = calibrate_delta0(model, _features(args.vib_ckpt, val.views), cfg.calibrate_bits)
    save_model(args.out, model, {"config_hash": config_hash(cfg)})
    print(json.dumps({"checkpoint": str(args.out), "final_loss": float(np.mean(trace[-100:])),
                      "delta0": model.cfg.delta0}))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    _, test, _ = load_dataset(cfg.dataset)
    z = _features(args.vib_ckpt, test.views)
    model = load_model(args.coder_ckpt)
    delta0 = args.delta0
    if isinstance(model, SrModel) and delta0 is None:
        delta0 = model.cfg.delta0
    channel = ChannelModel(**cfg.channel)
    started = time.time()
    rep = evaluate_accuracy(model, z, test.labels, delta0 if isinstance(model, SrModel) else None, channel)
    point = estimate_rate_relevance(model, z, test.labels, avg_bits=rep.avg_bits)
    metrics = dict(accuracy=rep.accuracy, avg_bits=rep.avg_bits, avg_rounds=rep.avg_rounds,
                   latency=rep.avg_bits / (8.0 * channel.uplink_rate), delta_bits=point.delta_bits,
                   rate_bits=point.rate_bits, code_entropy=point.code_entropy, delta0=delta0,
                   coder_checkpoint=str(args.coder_ckpt))
    rec = ExperimentRecord(uuid.uuid4().hex, cfg.seed, config_hash(cfg), "eval", cfg.to_dict(), metrics,
                           dataset_fingerprint=test.fingerprint(), started_at=started, finished_at=time.time())
    print(json.dumps(metrics, indent=2))
    if args.out:
        out = Path(args.out)
        append_record(out / "records.jsonl", rec)
        write_rate_relevance_csv(read_records(out / "records.jsonl"), out / "rate_relevance.csv")
    return 0


def cmd_sweep(args) -> int:
    grid = json.loads(Path(args.grid).read_text()) if args.grid else {}
    cfg = _config(args)
    out = Path(args.out or "runs")
    records = sweep(cfg, grid, out)
    for r in records:
        print(json.dumps({"run_id": r.run_id, "status": r.status, "accuracy": r.metrics.get("accuracy"),
                          "avg_bits": r.metrics.get("avg_bits"), "error": r.error}))
    return 0 if all(r.status == "ok" for r in records) else 1


def cmd_ablate(args) -> int:
    cfg = _config(args)
    budgets = [[int(v)] * len(cfg.d) for v in args.budgets.split(",")] if args.budgets else [list(cfg.d)]
    out = Path(args.out or "runs")
    records = ablate_dvib(cfg, budgets, out)
    for r in records:
        print(json.dumps({"arm": r.metrics.get("arm"), "d": r.config.get("d"), "status": r.status,
                          "accuracy": r.metrics.get("accuracy"), "delta_bits": r.metrics.get("delta_bits"),
                          "rate_bits": r.metrics.get("rate_bits")}))
    return 0 if all(r.status == "ok" for r in records) else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--data-dir", help="directory holding the four MNIST IDX files")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="coopedge", description="Cooperative edge inference experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="load and summarize a dataset")
    s.add_argument("--out", help="directory for dataset.json")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train-vib", parents=[common], help="train one device's extractor")
    s.add_argument("--device-index", type=int, required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(func=cmd_train_vib)

    for name, func in (("train-vddib", cmd_train_vddib), ("train-vddib-sr", cmd_train_vddib_sr)):
        s = sub.add_parser(name, parents=[common], help=f"train the {name[6:]} coder on frozen extractors")
        s.add_argument("--vib-ckpt", nargs="+", required=True, help="one extractor checkpoint per device, in order")
        s.add_argument("--out", required=True, help="checkpoint path")
        s.set_defaults(func=func)

    s = sub.add_parser("eval", parents=[common], help="evaluate a trained coder on the test split")
    s.add_argument("--vib-ckpt", nargs="+", required=True)
    s.add_argument("--coder-ckpt", required=True)
    s.add_argument("--delta0", type=float, help="confidence threshold (multi-round coders)")
    s.add_argument("--out", help="directory for records.jsonl and rate_relevance.csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="train and evaluate every grid point")
    s.add_argument("--grid", help="JSON object mapping config keys to value lists (default: the config's 'grid')")
    s.add_argument("--out", help="output directory (default: runs)")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("ablate-dvib", parents=[common], help="pipeline versus end-to-end baseline")
    s.add_argument("--budgets", help="comma-separated per-device code widths, e.g. 2,3,5")
    s.add_argument("--out", help="output directory (default: runs)")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "sweep" and args.config and not args.grid:
        raw = json.loads(Path(args.config).read_text())
        grid = raw.pop("grid", {})
        tmp = Path(args.out or "runs")
        tmp.mkdir(parents=True, exist_ok=True)
        (tmp / "template.json").write_text(json.dumps(raw, indent=2))
        (tmp / "grid.json").write_text(json.dumps(grid, indent=2))
        args.config, args.grid = str(tmp / "template.json"), str(tmp / "grid.json")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
