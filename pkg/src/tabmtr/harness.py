"""Prepare / run / report orchestration behind the command line.

Layout of an output directory::

    config.json            snapshot of the sweep config (checked on --resume)
    runs/<run_id>/         history.jsonl, result.json (the done-marker) or error.json
    results.jsonl          one ScoreRecord per line, canonical sweep order
    failures.jsonl         runs that raised, one JSON object per line
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import data as data_mod
from .augment import AugmentationSpec
from .config import CONTROL, ExperimentConfig
from .data import DataError, DatasetBundle
from .metrics import HIGHER_IS_BETTER, ScoreRecord, aggregate, average_rank, curve_table
from .metrics import export_curves, read_results, write_report
from .training import (ConfigError, TrainConfig, build_model, evaluate, finetune, ssl_pretrain,
                       supervised_control, supervised_train, write_history)

log = logging.getLogger(__name__)

CACHE_ENV = "TABMTR_CACHE_DIR"
CACHE_VERSION = 1
SPEC_KEYS = ("apply_probability", "label_mixing", "shared_mask")
STAGE_KEYS = ("max_epochs", "patience")


class RunError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# prepare


def cache_dir(config: ExperimentConfig) -> Path:
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path(config.output_dir) / "cache"


def _fingerprint(config: ExperimentConfig) -> str:
    ref = config.dataset
    h = hashlib.sha256()
    h.update(json.dumps({"cache_version": CACHE_VERSION, "bundle_version": data_mod.BUNDLE_FORMAT_VERSION,
                         "ref": {k: v for k, v in vars(ref).items() if k not in ("path", "descriptor")}},
                        sort_keys=True).encode())
    if ref.path is not None:
        for p in (ref.path, ref.descriptor):
            try:
                h.update(Path(p).read_bytes())
            except OSError as exc:
                raise DataError(f"cannot read {p}: {exc}") from None
    return h.hexdigest()[:16]


def load_raw(config: ExperimentConfig) -> data_mod.RawDataset:
    ref = config.dataset
    if ref.kind is not None:
        # the data itself is fixed; only the split depends on the run seed
        raw = data_mod.synth_generate(ref.kind, ref.n, 0, ref.n_features)
        raw.name = ref.label
        return raw
    descriptor = data_mod.load_descriptor(ref.descriptor)
    return data_mod.load_csv(ref.path, descriptor, ref.label)


def bundle_path(config: ExperimentConfig, seed: int) -> Path:
    return cache_dir(config) / f"{config.dataset.label}-{_fingerprint(config)}-s{seed}.npz"


def prepare(config: ExperimentConfig) -> dict[int, tuple[Path, bool]]:
    """Split and preprocess once per seed; returns seed -> (path, cache_hit)."""
    out = {}
    raw = None
    for seed in config.seeds:
        path = bundle_path(config, seed)
        if path.exists():
            out[seed] = (path, True)
            continue
        path.parent.mkdir(parents=True, exist_ok=True)
        raw = raw or load_raw(config)
        data_mod.build_bundle(raw, seed).save(path)
        log.info("prepared %s", path)
        out[seed] = (path, False)
    return out


# ---------------------------------------------------------------------------
# runs


@dataclass(frozen=True)
class Run:
    label: str
    method: str
    param: Optional[float]
    seed: int

    @property
    def run_id(self) -> str:
        slug = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in self.label)
        hp = "na" if self.param is None else f"{self.param:g}"
        return f"{slug}__{hp}__s{self.seed}"


def plan(config: ExperimentConfig) -> list[Run]:
    """Every (method, hyperparameter, seed) in canonical order."""
    return [Run(m.label, m.method, hp, seed)
            for m in config.methods for hp in m.values for seed in config.seeds]


def _train_config(overrides: dict, seed: int, spec: AugmentationSpec, ssl: bool = False) -> TrainConfig:
    kw = {k: v for k, v in overrides.items() if k not in SPEC_KEYS}
    return TrainConfig.ssl_defaults(seed=seed, augmentation=spec, **kw) if ssl \
        else TrainConfig(seed=seed, augmentation=spec, **kw)


def _spec(method: str, param, overrides: dict, **forced) -> AugmentationSpec:
    kw = {k: overrides[k] for k in SPEC_KEYS if k in overrides}
    kw.update(forced)
    return AugmentationSpec(method, param, **kw)


def execute_run(config: ExperimentConfig, run: Run, bundle: DatasetBundle, run_dir: Path) -> dict:
    """Train one cell and return the JSON-able done-marker content."""
    mc = config.model_config()
    extra = {}
    if config.experiment == "supervised":
        tc = _train_config(config.train, run.seed, _spec(run.method, run.param, config.train))
        result = supervised_train(build_model(bundle, mc, run.seed), bundle, tc)
        history = result.history
    elif run.label == CONTROL:
        tc = _train_config(config.train, run.seed, _spec("none", None, config.train))
        result = supervised_control(bundle, tc, mc)
        history = result.history
    else:
        # optimiser settings carry over from "train"; the stopping budget does not
        shared = {k: v for k, v in config.train.items() if k not in STAGE_KEYS}
        pre = _train_config({**shared, **config.pretrain}, run.seed,
                            _spec(run.method, run.param, config.pretrain, apply_probability=1.0),
                            ssl=True)
        pretrained = ssl_pretrain(build_model(bundle, mc, run.seed), bundle, pre)
        ft_spec = _spec(run.method, run.param, config.train) if config.finetune_augmentation \
            else _spec("none", None, config.train)
        tc = _train_config(config.train, run.seed, ft_spec)
        result = finetune(pretrained.model, bundle, tc)
        history = [dict(row, stage="pretrain") for row in pretrained.history] + \
                  [dict(row, stage="finetune") for row in result.history]
        extra = {"pretrain_initial_val_loss": pretrained.initial_val_loss,
                 "pretrain_best_val_loss": pretrained.best_val_loss,
                 "pretrain_best_epoch": pretrained.best_epoch}
    write_history(history, run_dir / "history.jsonl")
    records = []
    for split_name in ("val", "test"):
        _, value = evaluate(result.model, getattr(bundle, split_name), bundle.task, bundle.target_std)
        records.append(ScoreRecord(bundle.name, run.label, run.param, run.seed, bundle.metric, value,
                                   HIGHER_IS_BETTER[bundle.metric], split_name).to_json())
    return {"run_id": run.run_id, "records": records, "best_epoch": result.best_epoch,
            "epochs": len(result.history) - 1, **extra}


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _worker(config_dict: dict, run: Run, bundle_file: str, run_dir: str) -> tuple[str, dict | None, str | None]:
    config = ExperimentConfig.from_dict(config_dict)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        marker = execute_run(config, run, DatasetBundle.load(bundle_file), run_dir)
    except Exception as exc:  # recorded, the sweep goes on
        err = {"run_id": run.run_id, "error": f"{type(exc).__name__}: {exc}",
               "traceback": traceback.format_exc()}
        _atomic_write(run_dir / "error.json", json.dumps(err, indent=2))
        return run.run_id, None, err["error"]
    # wall time lives beside the marker so the marker itself is reproducible
    (run_dir / "timing.json").write_text(json.dumps({"wall_time": time.perf_counter() - start}))
    _atomic_write(run_dir / "result.json", json.dumps(marker, sort_keys=True))
    return run.run_id, marker, None


@dataclass
class SweepSummary:
    planned: int
    skipped: int  # already done before this invocation
    completed: int
    failed: list
    remaining: int

    @property
    def ok(self) -> bool:
        return not self.failed


def _snapshot_check(config: ExperimentConfig, out: Path, resume: bool) -> None:
    snap = out / "config.json"
    current = config.dumps()
    if snap.exists():
        if not resume:
            raise ConfigError(f"{out} already holds a sweep; pass --resume or pick a new output_dir")
        if snap.read_text(encoding="utf-8") != current:
            raise ConfigError(f"config differs from the snapshot in {snap}; refusing to resume")
    else:
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(snap, current)


def done_marker(out: Path, run: Run) -> Path:
    return out / "runs" / run.run_id / "result.json"


def write_results(config: ExperimentConfig, out: Path) -> Path:
    """Rewrite results.jsonl from the done-markers in canonical order."""
    lines = []
    for run in plan(config):
        marker = done_marker(out, run)
        if marker.exists():
            lines += json.loads(marker.read_text(encoding="utf-8"))["records"]
    path = out / "results.jsonl"
    _atomic_write(path, "".join(line + "\n" for line in lines))
    return path


def run_sweep(config: ExperimentConfig, resume: bool = False, max_runs: Optional[int] = None,
              workers: Optional[int] = None) -> SweepSummary:
    out = Path(config.output_dir)
    _snapshot_check(config, out, resume)
    bundles = {seed: str(p) for seed, (p, _) in prepare(config).items()}
    runs = plan(config)
    pending = [r for r in runs if not done_marker(out, r).exists()]
    skipped = len(runs) - len(pending)
    if max_runs is not None:
        pending = pending[:max_runs]
    n_workers = max(1, min(workers or config.workers or os.cpu_count() or 1, len(pending) or 1))
    cfg = config.to_dict()
    failed, completed = [], 0
    partial = open(out / "results.jsonl", "a", encoding="utf-8")
    failures = open(out / "failures.jsonl", "a", encoding="utf-8")

    def collect(run_id, marker, error):
        nonlocal completed
        if error is None:
            completed += 1
            for line in marker["records"]:
                partial.write(line + "\n")
            partial.flush()
            log.info("done %s", run_id)
        else:
            failed.append((run_id, error))
            failures.write(json.dumps({"run_id": run_id, "error": error}) + "\n")
            failures.flush()
            log.error("run %s failed: %s", run_id, error)

    try:
        if n_workers == 1:
            for r in pending:
                collect(*_worker(cfg, r, bundles[r.seed], str(out / "runs" / r.run_id)))
        else:
            with ProcessPoolExecutor(n_workers) as pool:
                futures = [pool.submit(_worker, cfg, r, bundles[r.seed], str(out / "runs" / r.run_id))
                           for r in pending]
                for fut in as_completed(futures):
                    collect(*fut.result())
    finally:
        partial.close()
        failures.close()
        write_results(config, out)
    remaining = sum(not done_marker(out, r).exists() for r in runs)
    return SweepSummary(len(runs), skipped, completed, failed, remaining)


# ---------------------------------------------------------------------------
# report


def report(in_dirs, out_dir, figures: bool = True) -> dict:
    """Aggregate one or more results directories into tables, curves and figures."""
    records = []
    for d in in_dirs:
        path = Path(d) / "results.jsonl"
        if not path.exists():
            raise DataError(f"no results.jsonl in {d}")
        records += read_results(path)
    if not records:
        raise DataError("results are empty")
    out = Path(out_dir)
    cells, missing = aggregate(records)
    if not cells:
        raise DataError("no (dataset, method) cell has both validation and test scores")
    table = average_rank(cells)
    order = []
    for r in records:
        if r.method not in order:
            order.append(r.method)
    paths = write_report(cells, table, out, method_order=order)
    with open(out / "missing.csv", "w", encoding="utf-8") as fh:
        fh.write("dataset,method,hyperparameter,seed,split\n")
        for m in missing:
            fh.write(",".join("" if v is None else str(v) for v in m) + "\n")
    paths["missing"] = out / "missing.csv"
    paths["curves"] = export_curves(records, out / "curves")
    if figures:
        from .plotting import plot_curves, plot_hyperparameter_histogram
        metrics = {c.dataset: c.metric for c in cells}
        paths["figures"] = plot_curves(curve_table(records), out / "figures", metrics) + \
            plot_hyperparameter_histogram(cells, out / "figures" / "selected_hyperparameters")
    paths["n_missing"] = len(missing)
    return paths

