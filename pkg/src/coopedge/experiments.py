"""Experiment configs, single runs, sweeps, the D-VIB ablation, and the record store."""

from __future__ import annotations

import csv
import dataclasses
import fcntl
import hashlib
import itertools
import json
import logging
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .data import (DatasetSpec, MultiViewDataset, corrupted_two_view_mnist, random_table, synth_discrete,
                   two_view_mnist)
from .dvib import DvibConfig, DvibModel, train_dvib
from .metrics import evaluate_accuracy, estimate_rate_relevance
from .nn import cross_entropy, Tensor
from .sim import ChannelModel, rounds_outcome
from .sr import SrConfig, SrModel, train_vddib_sr
from .vddib import VddibConfig, VddibModel, train_vddib
from .vib import VibConfig, VibModel, train_vib

log = logging.getLogger(__name__)

FAMILIES = ("vib", "vddib", "vddib-sr", "dvib-baseline")
CSV_COLUMNS = ["avg_bits", "accuracy", "delta_bits", "rate_bits", "beta", "T", "delta0", "seed"]
VIB_KEYS = {"steps", "lr", "batch_size", "samples", "feature_dim", "hidden", "decoder_hidden"}
CODER_KEYS = {"steps", "lr", "batch_size", "encoder_hidden", "joint_hidden", "pred_hidden", "aux_hidden", "gate_hidden"}


@dataclass
class ExperimentConfig:
    family: str = "vddib"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    extractor: str = "vib"  # "vib", or "none" to code the flattened raw views directly
    gamma: float = 1e-4
    beta: float = 0.01
    T: int = 1
    delta0: float | None = None
    calibrate_bits: float | None = None  # vddib-sr: pick delta0 on the validation split to meet this average
    n: tuple[int, ...] = (1, 1)
    d: tuple[int, ...] = (5, 5)  # per-device code width (per-round chunk width for vddib-sr)
    vib: dict = field(default_factory=dict)
    coder: dict = field(default_factory=dict)
    channel: dict = field(default_factory=dict)
    seed: int = 0
    out: str | None = None

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = DatasetSpec(**self.dataset)
        self.n, self.d = tuple(int(v) for v in self.n), tuple(int(v) for v in self.d)
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.extractor not in ("vib", "none"):
            raise ValueError("extractor must be 'vib' or 'none'")
        if len(self.n) != len(self.d):
            raise ValueError("n and d need one entry per device")
        if self.family != "vddib-sr":
            if self.T != 1:
                raise ValueError("T > 1 is only meaningful for vddib-sr")
            if self.delta0 is not None or self.calibrate_bits is not None:
                raise ValueError("delta0 and calibrate_bits only apply to vddib-sr")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.delta0 is not None and self.delta0 < 0:
            raise ValueError("delta0 must be nonnegative (values above 1 disable early stopping)")
        if self.family == "vddib-sr" and self.T > 1 and self.delta0 is None and self.calibrate_bits is None:
            raise ValueError("vddib-sr with T > 1 needs delta0 or calibrate_bits")
        for name, allowed in (("vib", VIB_KEYS), ("coder", CODER_KEYS)):
            unknown = set(getattr(self, name)) - allowed
            if unknown:
                raise ValueError(f"unknown {name} settings: {sorted(unknown)}")
        ChannelModel(**self.channel)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def replace(self, **changes) -> ExperimentConfig:
        """Copy with changes; dotted keys such as ``coder.steps`` reach into nested blocks."""
        d = self.to_dict()
        for key, value in changes.items():
            target = d
            *path, last = key.split(".")
            for p in path:
                target = target.setdefault(p, {})
            target[last] = value
        return ExperimentConfig.from_dict(d)


def config_hash(cfg: ExperimentConfig | dict) -> str:
    """SHA-256 of the canonical JSON of the config, excluding the output location."""
    d = cfg.to_dict() if isinstance(cfg, ExperimentConfig) else json.loads(json.dumps(cfg))
    d.pop("out", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass
class ExperimentRecord:
    run_id: str
    seed: int
    config_hash: str
    family: str
    config: dict
    metrics: dict
    status: str = "ok"
    error: str | None = None
    dataset_fingerprint: str | None = None
    started_at: float = 0.0
    finished_at: float = 0.0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, default=_plain)

    @classmethod
    def from_json(cls, line: str) -> ExperimentRecord:
        return cls(**json.loads(line))


def _plain(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


# --------------------------------------------------------------- record store
def append_record(path, record: ExperimentRecord) -> None:
    """Append one JSON line under an exclusive file lock; existing lines are never touched."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            fh.write(record.to_json() + "\n")
            fh.flush()
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def read_records(path) -> list[ExperimentRecord]:
    path = Path(path)
    if not path.exists():
        return []
    return [ExperimentRecord.from_json(l) for l in path.read_text().splitlines() if l.strip()]


def csv_row(rec: ExperimentRecord) -> dict:
    m, c = rec.metrics, rec.config
    return {
        "avg_bits": m.get("avg_bits"),
        "accuracy": m.get("accuracy"),
        "delta_bits": m.get("delta_bits"),
        "rate_bits": m.get("rate_bits"),
        "beta": c.get("beta"),
        "T": c.get("T"),
        "delta0": m.get("delta0", c.get("delta0")),
        "seed": rec.seed,
    }


def write_rate_relevance_csv(records: Sequence[ExperimentRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for rec in records:
            if rec.status == "ok":
                w.writerow(csv_row(rec))


# -------------------------------------------------------------------- datasets
_DATASETS: dict[str, tuple] = {}


def load_dataset(spec: DatasetSpec, data_dir=None) -> tuple[MultiViewDataset, MultiViewDataset, MultiViewDataset | None]:
    """(train, test, validation) for a dataset spec; results are memoized per process."""
    key = json.dumps(dataclasses.asdict(spec), sort_keys=True) + str(data_dir)
    if key in _DATASETS:
        return _DATASETS[key]
    root = data_dir or spec.data_dir
    val = None
    if spec.source == "idx-files":
        if root is None:
            raise ValueError("idx-files needs a data directory")
        train, test, val = two_view_mnist(root, spec.val_size, spec.seed, spec.train_size, full=spec.views == "full")
    elif spec.source == "corrupted-mnist":
        if root is None:
            raise ValueError("corrupted-mnist needs a data directory")
        train, test = corrupted_two_view_mnist(root, spec.seed, spec.train_size or 50_000, spec.test_size or 20_000,
                                               spec.mask_size, spec.noise_high)
        if spec.val_size:
            val, train = train.subset(slice(0, spec.val_size)), train.subset(slice(spec.val_size, None))
    else:
        ex = spec.extra
        rng = np.random.default_rng([spec.seed, 11])
        table = random_table(rng, ex.get("num_classes", 4), ex.get("alphabet", [6] * spec.K), ex.get("concentration", 0.5))
        train, _ = synth_discrete(table, spec.train_size or 20_000, rng)
        test, _ = synth_discrete(table, spec.test_size or 50_000, rng)
        if spec.val_size:
            val, _ = synth_discrete(table, spec.val_size, rng)
    if spec.test_size is not None and spec.source == "idx-files":
        test = test.subset(slice(0, spec.test_size))
    _DATASETS[key] = (train, test, val)
    return _DATASETS[key]


# ---------------------------------------------------------------------- runs
def _flat(ds: MultiViewDataset) -> list[np.ndarray]:
    return [np.asarray(v, dtype=np.float64).reshape(len(v), -1) for v in ds.views]


def vib_config(cfg: ExperimentConfig) -> VibConfig:
    return VibConfig(gamma=cfg.gamma, seed=cfg.seed, **cfg.vib)


def train_extractors(cfg: ExperimentConfig, train: MultiViewDataset, cache: dict | None = None) -> list[VibModel]:
    vcfg = vib_config(cfg)
    models = []
    for k, x in enumerate(_flat(train)):
        key = ("vib", train.fingerprint(), json.dumps(dataclasses.asdict(vcfg), sort_keys=True), k)
        if cache is not None and key in cache:
            models.append(cache[key])
            continue
        m, _ = train_vib(x, train.labels, vcfg, k, train.num_classes)
        if cache is not None:
            cache[key] = m
        models.append(m)
    return models


def _coder_kwargs(cfg: ExperimentConfig, sr: bool) -> dict:
    kw = dict(cfg.coder)
    if sr and "joint_hidden" in kw:
        kw["pred_hidden"] = kw.pop("joint_hidden")
    if not sr:
        if "pred_hidden" in kw:
            kw["joint_hidden"] = kw.pop("pred_hidden")
        kw.pop("gate_hidden", None)
    return kw


def calibrate_delta0(model: SrModel, features: Sequence[np.ndarray], target_bits: float,
                     grid: Sequence[float] | None = None) -> float:
    """Largest threshold whose average bits on ``features`` stays within ``target_bits``.

    Average bits never increase as the threshold decreases, so the scan stops at
    the first (largest) admissible value. Falls back to 0 (stop after round 1).
    """
    grid = np.concatenate([[1.01], np.round(np.arange(1.0, -0.0005, -0.001), 3)]) if grid is None else grid
    out = model.run_all_rounds(features)
    for d0 in grid:
        if rounds_outcome(out["probs"], out["attention"], model.chunk_specs, float(d0)).bits.mean() <= target_bits:
            return float(d0)
    return 0.0


def _trace_digest(*traces) -> str:
    h = hashlib.sha256()
    for t in traces:
        h.update(np.asarray(t, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


def run_experiment(cfg: ExperimentConfig, cache: dict | None = None, data_dir=None,
                   checkpoint_dir=None) -> tuple[ExperimentRecord, dict[str, Any]]:
    """Train and evaluate one configuration; returns the record and the trained models."""
    started = time.time()
    train, test, val = load_dataset(cfg.dataset, data_dir)
    channel = ChannelModel(**cfg.channel)
    metrics: dict[str, Any] = {}
    models: dict[str, Any] = {}
    traces = []
    C = train.num_classes
    if cfg.family == "dvib-baseline":
        dkw = {k: v for k, v in cfg.coder.items() if k in {"encoder_hidden", "joint_hidden", "aux_hidden", "lr", "batch_size"}}
        dkw.update({k: v for k, v in cfg.vib.items() if k in {"feature_dim", "hidden"}})
        steps = cfg.vib.get("steps", VibConfig.steps) + cfg.coder.get("steps", VddibConfig.steps)
        dcfg = DvibConfig(gamma=cfg.gamma, beta=cfg.beta, n=cfg.n, d=cfg.d, steps=steps, seed=cfg.seed, **dkw)
        model, trace = train_dvib(train.views, train.labels, dcfg, C)
        traces.append(trace)
        models["coder"] = model
        test_in = _flat(test)
        rep = evaluate_accuracy(model, test_in, test.labels)
        logits = model.predict_logits(test_in)
        point = estimate_rate_relevance(model, test_in, test.labels, avg_bits=rep.avg_bits)
    else:
        if cfg.extractor == "vib":
            extractors = train_extractors(cfg, train, cache)
            models["extractors"] = extractors
            feats = lambda ds: [m.features(x) for m, x in zip(extractors, _flat(ds))]
        else:
            feats = _flat
        if cfg.family == "vib":
            if cfg.extractor != "vib":
                raise ValueError("the vib family needs extractor='vib'")
            accs = []
            for m, x in zip(extractors, _flat(test)):
                z = m.features(x)
                accs.append(float((m.decoder(Tensor(z)).data.argmax(-1) == test.labels).mean()))
            metrics.update(accuracy=float(np.mean(accs)), device_accuracy=accs)
            return _finish(cfg, metrics, train, started), models
        ztr, zte = feats(train), feats(test)
        if cfg.family == "vddib":
            vcfg = VddibConfig(beta=cfg.beta, n=cfg.n, d=cfg.d, seed=cfg.seed, **_coder_kwargs(cfg, sr=False))
            model, trace = train_vddib(ztr, train.labels, vcfg, C)
            rep = evaluate_accuracy(model, zte, test.labels)
            logits = model.predict_logits(zte)
        else:
            scfg = SrConfig(T=cfg.T, beta=cfg.beta, n=cfg.n, d_chunk=cfg.d, seed=cfg.seed,
                            delta0=cfg.delta0 if cfg.delta0 is not None else 0.0, **_coder_kwargs(cfg, sr=True))
            model, trace = train_vddib_sr(ztr, train.labels, scfg, C)
            delta0 = cfg.delta0
            if cfg.calibrate_bits is not None:
                if val is None:
                    raise ValueError("calibrate_bits needs a validation split (dataset.val_size > 0)")
                delta0 = calibrate_delta0(model, feats(val), cfg.calibrate_bits)
            rep = evaluate_accuracy(model, zte, test.labels, delta0 if model.T > 1 else None, channel)
            metrics["delta0"] = delta0
            with_stop = model.run_all_rounds(zte)
            logits = np.log(np.clip(with_stop["probs"][-1], 1e-300, None))
        traces.append(trace)
        models["coder"] = model
        point = estimate_rate_relevance(model, zte, test.labels, avg_bits=rep.avg_bits)
    ce = float(cross_entropy(Tensor(logits), test.labels).data.mean())
    metrics.update(
        accuracy=rep.accuracy, avg_bits=rep.avg_bits, avg_rounds=rep.avg_rounds, ce=ce,
        latency=float(rep.avg_bits / (8.0 * channel.uplink_rate)) if channel.mode == "serial" else None,
        delta_bits=point.delta_bits, rate_bits=point.rate_bits, code_entropy=point.code_entropy,
        aux_relevance=point.aux_relevance, label_entropy=point.label_entropy,
        final_loss=float(np.mean(traces[-1][-100:])) if traces and len(traces[-1]) else None,
        trace_digest=_trace_digest(*traces),
    )
    if channel.mode == "parallel":
        metrics["latency"] = None  # per-episode device split is reported by the simulator
    rec = _finish(cfg, metrics, train, started)
    if checkpoint_dir is not None:
        from .checkpoints import save_model

        ck = Path(checkpoint_dir)
        ck.mkdir(parents=True, exist_ok=True)
        for k, m in enumerate(models.get("extractors", [])):
            save_model(ck / f"{rec.run_id}-vib-k{k}.ntar", m)
        save_model(ck / f"{rec.run_id}-coder.ntar", models["coder"], {"run_id": rec.run_id})
    return rec, models


def _finish(cfg: ExperimentConfig, metrics: dict, train: MultiViewDataset, started: float) -> ExperimentRecord:
    return ExperimentRecord(uuid.uuid4().hex, cfg.seed, config_hash(cfg), cfg.family, cfg.to_dict(), metrics,
                            dataset_fingerprint=train.fingerprint(), started_at=started, finished_at=time.time())


def _failed(cfg: ExperimentConfig, err: Exception, started: float) -> ExperimentRecord:
    return ExperimentRecord(uuid.uuid4().hex, cfg.seed, config_hash(cfg), cfg.family, cfg.to_dict(), {},
                            status="failed", error=f"{type(err).__name__}: {err}", started_at=started,
                            finished_at=time.time())


def expand_grid(grid: dict[str, Sequence]) -> list[dict]:
    """Cartesian product of the grid axes; an empty grid (or any empty axis) yields nothing."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        return []
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def sweep(template: ExperimentConfig, grid: dict[str, Sequence], out_dir=None, data_dir=None,
          cache: dict | None = None) -> list[ExperimentRecord]:
    """One trained and evaluated record per grid point.

    A failing point is recorded with status "failed" and the sweep moves on.
    Records are appended to ``records.jsonl`` and ``rate_relevance.csv`` is
    rewritten from the whole store.
    """
    cache = {} if cache is None else cache
    records = []
    for point in expand_grid(grid):
        started = time.time()
        try:
            cfg = template.replace(**point)
        except Exception as err:  # invalid point: keep the template's identity for the record
            log.warning("grid point %s rejected: %s", point, err)
            rec = _failed(template, err, started)
            rec.metrics["grid_point"] = point
        else:
            try:
                rec, _ = run_experiment(cfg, cache, data_dir)
            except Exception as err:
                log.warning("grid point %s failed: %s", point, err)
                rec = _failed(cfg, err, started)
        records.append(rec)
        if out_dir is not None:
            append_record(Path(out_dir) / "records.jsonl", rec)
    if out_dir is not None:
        write_rate_relevance_csv(read_records(Path(out_dir) / "records.jsonl"), Path(out_dir) / "rate_relevance.csv")
    return records


def ablate_dvib(template: ExperimentConfig, budgets: Sequence[Sequence[int]], out_dir=None, data_dir=None,
                cache: dict | None = None) -> list[ExperimentRecord]:
    """Paired runs per bit budget: extraction then coding (arm "pipeline") versus the
    end-to-end baseline (arm "dvib"). ``budgets`` lists per-device code widths.

    The baseline gets as many updates as the pipeline's two stages combined.
    """
    if template.dataset.source != "corrupted-mnist":
        log.warning("ablation template uses %s rather than corrupted-mnist", template.dataset.source)
    cache = {} if cache is None else cache
    records = []
    for d in budgets:
        pair = uuid.uuid4().hex[:12]
        for arm, family in (("pipeline", "vddib"), ("dvib", "dvib-baseline")):
            cfg = template.replace(family=family, d=list(d), T=1, delta0=None, calibrate_bits=None)
            started = time.time()
            try:
                rec, _ = run_experiment(cfg, cache, data_dir)
            except Exception as err:
                log.warning("ablation arm %s at d=%s failed: %s", arm, d, err)
                rec = _failed(cfg, err, started)
            rec.metrics.update(arm=arm, pair=pair)
            records.append(rec)
            if out_dir is not None:
                append_record(Path(out_dir) / "records.jsonl", rec)
    if out_dir is not None:
        write_rate_relevance_csv(read_records(Path(out_dir) / "records.jsonl"), Path(out_dir) / "rate_relevance.csv")
    return records
