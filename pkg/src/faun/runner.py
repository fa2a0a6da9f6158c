"""Experiment pipeline: train under attack, recover, evaluate, write artifacts.

Artifacts written to the output directory:

``rounds.jsonl``   one metrics record per evaluated round (no wall-clock fields,
                   so identical configs give byte-identical files)
``timings.jsonl``  wall-clock per evaluated round
``summary.json``   last record of every phase, config/dataset hashes, wall-clock
``trace.csv``      elimination trace (method ``faun`` only)
``manifest.json``  config hash, tool version, timestamps, per-phase round counts
``config.json``    the fully resolved configuration
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import data as datamod
from .attacks import poison_client
from .config import ExperimentConfig
from .errors import ConfigError, FaunError
from .fl import BENIGN, MALICIOUS, ClientRecord, run_finetune, run_training
from .metrics import (MetricsRecord, accuracy, attack_success_rate, membership_inference_sr,
                      triggered_test_set)
from .model import ModelSpec, per_example_loss
from .seeding import PHASE_UNLEARN, rng, seed_key
from .unlearn import faun_unlearn, federaser_unlearn, retrain_from_scratch

log = logging.getLogger(__name__)

MISR_CONVENTION = ("raw balanced accuracy of the optimal-threshold loss attack; "
                   ">= 0.5 by construction, 0.5 means no membership signal")
SUMMARY_KEYS = ("acc", "ma", "asr", "misr")


@dataclass
class Scenario:
    spec: ModelSpec
    clients: list[ClientRecord]
    proxy: datamod.ProxyDataset
    test: datamod.ExampleBatch
    members: datamod.ExampleBatch | None
    triggered: datamod.ExampleBatch | None
    dataset_hash: str

    @property
    def retained(self):
        return [c for c in self.clients if not c.is_malicious]

    @property
    def malicious(self):
        return [c for c in self.clients if c.is_malicious]


def _hash_arrays(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def build_scenario(cfg: ExperimentConfig) -> Scenario:
    ds, fl, seed = cfg.dataset, cfg.fl, cfg.seed
    n_pool = ds.n_train + ds.n_test + ds.proxy_size
    if ds.kind == "synthetic":
        side = ds.image_side
        pool = datamod.make_synthetic(ds.num_classes, side * side, n_pool, ds.class_separation,
                                      seed_key(seed, "data"), noise_std=ds.noise_std,
                                      image_shape=(side, side), background=ds.background)
    else:
        pool = datamod.load_idx_images(ds.images_path, ds.labels_path, ds.limit or n_pool)
        if len(pool) < n_pool:
            raise ConfigError(f"IDX files hold {len(pool)} examples, need {n_pool}", "dataset")
        pool = pool.subset(np.arange(n_pool))
    proxy, rest = datamod.split_proxy(pool, ds.proxy_size, seed_key(seed, "split", 0))
    test, train = datamod.holdout_split(rest, ds.n_test, seed_key(seed, "split", 1))
    plan = datamod.partition(train, fl.num_clients, fl.partition, fl.alpha, seed_key(seed, "partition", 0))
    malicious = set(rng(seed, "partition", 1).choice(fl.num_clients, fl.num_malicious, replace=False).tolist())

    clients = []
    for cid, shard in enumerate(plan.shards(train)):
        client = ClientRecord(cid, shard, MALICIOUS if cid in malicious else BENIGN)
        if client.is_malicious:
            poison_client(client, cfg.attack, seed_key(seed, "poison", cid))
        clients.append(client)

    spec = ModelSpec(pool.features.shape[1], cfg.model.hidden_dims, ds.num_classes)
    members = datamod.ExampleBatch.concat([c.shard for c in clients if c.is_malicious]) if malicious else None
    triggered = triggered_test_set(test, cfg.attack.trigger) if cfg.attack.kind == "backdoor" else None
    digest = _hash_arrays(pool.features, pool.labels, proxy.batch.index, test.index, plan.assignment)
    return Scenario(spec, clients, proxy, test, members, triggered, digest)


class Recorder:
    """Evaluates models on the configured cadence and accumulates timings."""

    def __init__(self, cfg: ExperimentConfig, scenario: Scenario):
        self.cfg = cfg
        self.sc = scenario
        self.records: list[MetricsRecord] = []
        self.phase_rounds: dict[str, int] = {}
        self.phase_wall: dict[str, float] = {}
        self.phase_eval: dict[str, float] = {}
        self._last = time.perf_counter()

    def evaluate(self, model, phase, round_index) -> MetricsRecord:
        sc = self.sc
        backdoor = sc.triggered is not None
        acc = accuracy(model, sc.spec, sc.test)
        rec = MetricsRecord(
            round=round_index,
            phase=phase,
            acc=acc,
            ma=acc if backdoor else None,
            asr=attack_success_rate(model, sc.spec, sc.test, self.cfg.attack.trigger, sc.triggered) if backdoor else None,
            misr=(membership_inference_sr(model, sc.spec, sc.members, sc.test, seed_key(self.cfg.seed, "mia"))
                  if sc.members is not None else None),
            mean_loss=float(per_example_loss(model, sc.spec, sc.test.features, sc.test.labels).mean()),
        )
        return rec

    def round_done(self, model, phase, round_index, force=False, every=1):
        """Count the round and evaluate it if the cadence (or ``force``) says so."""
        self.phase_rounds[phase] = self.phase_rounds.get(phase, 0) + 1
        if not (force or round_index % every == 0):
            return
        start = time.perf_counter()
        rec = self.evaluate(model, phase, round_index)
        spent = time.perf_counter() - start
        self.phase_eval[phase] = self.phase_eval.get(phase, 0.0) + spent
        rec.elapsed_ms = round(1000.0 * (start - self._last), 3)
        self._last = time.perf_counter()
        self.records.append(rec)

    def timed(self, phase, fn, *args, **kwargs):
        start = time.perf_counter()
        self._last = start
        out = fn(*args, **kwargs)
        self.phase_wall[phase] = self.phase_wall.get(phase, 0.0) + time.perf_counter() - start
        return out


def _unlearn_eval_due(t1, cfg: ExperimentConfig):
    f = cfg.faun
    return t1 % cfg.eval.unlearn_every == 0 or t1 in (f.eliminate_rounds, f.total_unlearn_rounds)


def execute(cfg: ExperimentConfig, scenario: Scenario | None = None):
    """Run the pipeline in memory; returns ``(recorder, extras)``."""
    sc = build_scenario(cfg) if scenario is None else scenario
    rec = Recorder(cfg, sc)
    fl, seed = cfg.fl, cfg.seed
    extras = {"dataset_hash": sc.dataset_hash}

    def on_train(r, model, _updates):
        rec.round_done(model, "train", r, force=r == fl.rounds, every=cfg.eval.train_every)

    result = rec.timed("train", run_training, sc.clients, sc.spec, fl, seed, attack=cfg.attack,
                       window=cfg.faun.window,
                       calibration_period=cfg.federaser.calibration_period if cfg.method == "federaser" else None,
                       on_round=on_train)
    if fl.rounds == 0:
        rec.round_done(result.model, "train", 0, force=True)
        rec.phase_rounds["train"] = 0
    extras["poisoned_model"] = result.model
    extras["history"] = result.history
    model = result.model

    if cfg.method == "faun":
        def on_faun(t, m, phase):
            rec.round_done(m, phase, t + 1, force=_unlearn_eval_due(t + 1, cfg), every=cfg.eval.unlearn_every)

        model, trace = rec.timed("unlearn", faun_unlearn, result.model, result.windows, sc.retained,
                                 cfg.faun, fl, sc.spec, sc.proxy, seed, on_round=on_faun)
        extras["trace"] = trace
    elif cfg.method == "finetune_only":
        total = cfg.faun.total_unlearn_rounds
        model = rec.timed("unlearn", run_finetune, result.model, sc.retained, total, sc.spec, fl, seed,
                          stream=PHASE_UNLEARN,
                          on_round=lambda t, m: rec.round_done(m, "unlearn_finetune", t + 1,
                                                               force=t + 1 == total, every=cfg.eval.unlearn_every))
    elif cfg.method == "retrain":
        model = rec.timed("unlearn", retrain_from_scratch, sc.retained, sc.spec, fl, seed,
                          on_round=lambda r, m: rec.round_done(m, "retrain", r, force=r == fl.rounds,
                                                               every=cfg.eval.train_every))
    elif cfg.method == "federaser":
        hist = result.history
        n_cal = len(hist.calibration)
        model = rec.timed("unlearn", federaser_unlearn, hist.checkpoints, hist.calibration, sc.retained,
                          cfg.federaser, fl, sc.spec, seed,
                          on_round=lambda j, m: rec.round_done(m, "calibrate", j + 1, force=j + 1 == n_cal,
                                                               every=cfg.eval.unlearn_every))
    extras["final_model"] = model
    return rec, extras


def _phase_order(records):
    order = []
    for r in records:
        if r.phase not in order:
            order.append(r.phase)
    return order


def summarize(cfg: ExperimentConfig, rec: Recorder, dataset_hash: str) -> dict:
    phases = {}
    for r in rec.records:
        phases[r.phase] = r.to_dict(timing=False)
    order = _phase_order(rec.records)
    recovery = [p for p in order if p != "train"]
    unlearn_wall = rec.phase_wall.get("unlearn", 0.0)
    unlearn_eval = sum(rec.phase_eval.get(p, 0.0) for p in recovery)
    return {
        "method": cfg.method,
        "attack": cfg.attack.kind,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "dataset_hash": dataset_hash,
        "phase_sequence": order,
        "phase_rounds": {p: rec.phase_rounds.get(p, 0) for p in order},
        "phases": phases,
        "final": rec.records[-1].to_dict(timing=False),
        "misr_convention": MISR_CONVENTION,
        "wall_clock": {
            "train_s": rec.phase_wall.get("train", 0.0),
            "train_eval_s": rec.phase_eval.get("train", 0.0),
            "recovery_s": unlearn_wall,
            "recovery_eval_s": unlearn_eval,
            # recovery compute time excludes metric evaluation
            "recovery_compute_s": unlearn_wall - unlearn_eval,
        },
    }


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_artifacts(out: Path, cfg, rec: Recorder, extras, summary, started, finished) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rounds.jsonl", "w") as fh:
        for r in rec.records:
            fh.write(json.dumps(r.to_dict(timing=False), sort_keys=True) + "\n")
    with open(out / "timings.jsonl", "w") as fh:
        for r in rec.records:
            fh.write(json.dumps({"phase": r.phase, "round": r.round, "elapsed_ms": r.elapsed_ms}) + "\n")
    _dump_json(out / "summary.json", summary)
    if "trace" in extras:
        extras["trace"].write_csv(out / "trace.csv")
    _dump_json(out / "config.json", cfg.to_dict())
    _dump_json(out / "manifest.json", {
        "config_hash": summary["config_hash"],
        "dataset_hash": summary["dataset_hash"],
        "tool_version": __version__,
        "started": started,
        "finished": finished,
        "phase_rounds": summary["phase_rounds"],
        "wall_clock": summary["wall_clock"],
    })


def default_output_dir(cfg: ExperimentConfig) -> Path:
    import os

    root = Path(os.environ.get("FAUN_OUTPUT_ROOT", "runs"))
    return root / f"{cfg.method}-{cfg.attack.kind}-s{cfg.seed}-{cfg.config_hash()[:10]}"


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> int:
    """Run one configured experiment and write its artifacts. Returns an exit status."""
    out = Path(out_dir or cfg.output_dir or default_output_dir(cfg))
    started = datetime.now(timezone.utc).isoformat()
    try:
        rec, extras = execute(cfg)
        summary = summarize(cfg, rec, extras["dataset_hash"])
        write_artifacts(out, cfg, rec, extras, summary, started, datetime.now(timezone.utc).isoformat())
    except Exception as exc:  # noqa: BLE001 - every failure becomes a structured record
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "error.json", {
            "error": type(exc).__name__,
            "message": str(exc),
            "expected": isinstance(exc, FaunError),
            "traceback": traceback.format_exc(),
        })
        log.error("run failed: %s: %s", type(exc).__name__, exc)
        return 1
    log.info("wrote artifacts to %s", out)
    return 0


COMPARE_COLUMNS = ("acc", "misr", "asr", "ma", "time_s")


def _summary_row(summary: dict) -> dict:
    final = summary["final"]
    row = {k: final.get(k) for k in SUMMARY_KEYS}
    row["time_s"] = summary["wall_clock"]["recovery_compute_s"]
    return row


def compare_runs(paths, csv_path=None) -> str:
    """Side-by-side table of final metrics and recovery time, one row per run.

    Delta columns are relative to the first run. Runs must share a dataset hash.
    """
    paths = [Path(p) for p in paths]
    if len(paths) < 2:
        raise ConfigError("compare needs at least two summary.json files")
    summaries = []
    for p in paths:
        p = p / "summary.json" if p.is_dir() else p
        summaries.append(json.loads(p.read_text()))
    hashes = {s["dataset_hash"] for s in summaries}
    if len(hashes) > 1:
        raise ConfigError(
            "runs were made on different datasets (dataset hashes differ); "
            "comparing their metrics would be meaningless"
        )
    rows = [_summary_row(s) for s in summaries]
    base = rows[0]
    table = []
    for s, row in zip(summaries, rows):
        entry = {"method": s["method"], "attack": s["attack"], "seed": s["seed"], **row}
        for k in COMPARE_COLUMNS:
            entry[f"d_{k}"] = None if row[k] is None or base[k] is None else row[k] - base[k]
        table.append(entry)

    header = ["method", "attack", "seed", *COMPARE_COLUMNS, *(f"d_{k}" for k in COMPARE_COLUMNS)]
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
            writer.writeheader()
            for entry in table:
                writer.writerow({k: "" if entry[k] is None else entry[k] for k in header})

    def cell(v):
        if v is None:
            return "-"
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    cells = [header] + [[cell(e[k]) for k in header] for e in table]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)
