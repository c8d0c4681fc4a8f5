"""Experiment orchestration: corpora, end-to-end runs, ablations and sweeps.

Every run goes through :func:`run_pipeline`, so ``train``, ``ablate`` and
``sweep`` agree on what a run is. CSV writers use fixed headers and ``repr``
floats, so identical configs give byte-identical files.
"""
from __future__ import annotations

import csv
import json
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

from .checkpoint import load_checkpoint
from .config import AblationVariant, ConfigError, RunConfig, save_resolved, validate
from .curriculum import (CurriculumSchedule, DifficultyTable, build_schedule, cross_review, curriculum_train,
                         make_shards, plain_train, train_shard_models)
from .data_io import (SceneSample, SyntheticSceneSpec, Vocabulary, build_vocab, generate_corpus,
                      load_region_features, write_captions, write_region_features)
from .metrics import EVAL_COLUMNS
from .model import SceneTensors
from .training import TrainResult, evaluate, restore_trainer, save_trainer, steps_for

log = logging.getLogger(__name__)

FEATURES_FILE = "regions.dgrf"
CAPTIONS_FILE = "captions.jsonl"
METRIC_KEYS = EVAL_COLUMNS[1:]
LOG_COLUMNS = ("phase", "index", "steps", "total_steps", "loss") + tuple(f"val_{k}" for k in METRIC_KEYS)
RUN_COLUMNS = ("variant", "seed") + METRIC_KEYS + ("total_steps",)
ABLATION_COLUMNS = ("variant", "n_seeds") + METRIC_KEYS + ("total_steps", "seeds", "bleu1_per_seed")


# -- corpora ----------------------------------------------------------------

def synthetic_spec(cfg: RunConfig) -> SyntheticSceneSpec:
    return SyntheticSceneSpec(feature_dim=cfg.feature_dim, noise=cfg.noise, contexts=tuple(cfg.contexts),
                              context_strength=cfg.context_strength, n_groups=cfg.n_groups,
                              context_visibility=cfg.context_visibility,
                              max_objects=min(6, cfg.max_regions), seed=cfg.data_seed)


def make_corpus(cfg: RunConfig) -> list[SceneSample]:
    n = cfg.n_train + cfg.n_val + cfg.n_test
    return generate_corpus(synthetic_spec(cfg), n, cfg.n_val, cfg.n_test)


def write_corpus(samples: Sequence[SceneSample], out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_region_features(out / FEATURES_FILE, samples)
    write_captions(out / CAPTIONS_FILE, samples)
    return out / FEATURES_FILE, out / CAPTIONS_FILE


def load_corpus(data_dir, max_regions: int) -> list[SceneSample]:
    d = Path(data_dir)
    if not (d / FEATURES_FILE).exists():
        raise FileNotFoundError(f"no {FEATURES_FILE} in {d}")
    caps = d / CAPTIONS_FILE
    return load_region_features(d / FEATURES_FILE, caps if caps.exists() else None, max_regions)


@dataclass
class Workspace:
    """A corpus turned into model inputs, with rows grouped by split."""

    samples: list[SceneSample]
    vocab: Vocabulary
    data: SceneTensors
    splits: dict[str, list[int]] = field(default_factory=dict)

    def rows(self, split: str) -> list[int]:
        return self.splits.get(split, [])

    def ids(self, split: str) -> list[int]:
        return [int(self.data.ids[r]) for r in self.rows(split)]


def prepare(cfg: RunConfig, samples: Sequence[SceneSample] | None = None,
            vocab: Vocabulary | None = None) -> Workspace:
    if samples is None:
        samples = load_corpus(cfg.data_dir, cfg.max_regions) if cfg.data_dir else make_corpus(cfg)
    samples = list(samples)
    if vocab is None:
        train_refs = [r for s in samples if s.split == "train" for r in s.references]
        if not train_refs:
            raise ValueError("corpus has no training captions")
        vocab = build_vocab(train_refs)
    data = SceneTensors.build(samples, vocab, cfg.model_config())
    splits: dict[str, list[int]] = {}
    for row, s in enumerate(samples):
        splits.setdefault(s.split, []).append(row)
    return Workspace(samples, vocab, data, splits)


# -- worker pool ------------------------------------------------------------

@contextmanager
def worker_map(workers: int) -> Iterator[Callable]:
    """``map`` for one worker, otherwise a bounded process pool's ordered ``map``."""
    if workers <= 1:
        yield map
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield pool.map


# -- single runs ------------------------------------------------------------

def difficulty_table(ws: Workspace, cfg: RunConfig, out_dir=None, map_fn: Callable = map) -> DifficultyTable:
    """Shard the training split, train one model per shard, cross-review."""
    plan = make_shards(ws.ids("train"), cfg.M, cfg.seed)
    shard_dir = Path(out_dir) / "shards" if out_dir is not None else None
    records = train_shard_models(plan, ws.data, cfg, ws.vocab, shard_dir, map_fn)
    table = cross_review(plan, ws.data, records, ws.vocab, cfg.metric, cfg.max_len)
    if out_dir is not None:
        table.write_csv(Path(out_dir) / "difficulty.csv")
    return table


def make_schedule(cfg: RunConfig, table: DifficultyTable, out_dir=None) -> CurriculumSchedule:
    schedule = build_schedule(table.ds(), cfg.M, cfg.seed, cfg.schedule_mode)
    if out_dir is not None:
        (Path(out_dir) / "schedule.json").write_text(schedule.to_json())
    return schedule


@dataclass
class RunOutcome:
    label: str
    seed: int
    result: TrainResult
    summary: dict = field(default_factory=dict)
    per_image: list[dict] = field(default_factory=list)
    captions: list[str] = field(default_factory=list)

    @property
    def total_steps(self) -> int:
        return self.result.trainer.step


def run_pipeline(ws: Workspace, cfg: RunConfig, out_dir=None, table: DifficultyTable | None = None,
                 resume=None, map_fn: Callable = map, label: str = "") -> RunOutcome:
    """Train (plain or curriculum), then score the test split.

    With ``resume`` the run continues from a checkpoint written by an earlier
    call; the curriculum schedule is read back from that checkpoint.
    """
    train_rows, val_rows = ws.rows("train"), ws.rows("val")
    if not train_rows:
        raise ValueError("corpus has no training split")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(resume) if resume else None
    trainer = restore_trainer(ckpt, ws.data, cfg) if ckpt is not None else None
    total = steps_for(cfg.epochs, len(train_rows), cfg.batch_size)

    schedule = None
    if cfg.curriculum:
        if ckpt is not None and "schedule" in ckpt.header:
            schedule = CurriculumSchedule.from_json(ckpt.header["schedule"])
        else:
            table = table if table is not None else difficulty_table(ws, cfg, out, map_fn)
            schedule = make_schedule(cfg, table, out)

    def checkpoint(result: TrainResult) -> None:
        if out is not None:
            extra = {"schedule": schedule.to_json()} if schedule is not None else {}
            save_trainer(out / "model.dgcn", result.trainer, ws.vocab, **extra)

    if schedule is not None:
        result = curriculum_train(schedule, ws.data, train_rows, cfg, ws.vocab, val_rows, cfg.seed, total,
                                  trainer, checkpoint)
    else:
        result = plain_train(ws.data, train_rows, cfg, ws.vocab, val_rows, cfg.seed, total, trainer, checkpoint)
    outcome = RunOutcome(label, cfg.seed, result)
    if out is not None:
        earlier = []
        if ckpt is not None and (out / "train_log.csv").exists():
            earlier = [r for r in read_rows(out / "train_log.csv") if int(r["total_steps"]) <= ckpt.header["step"]]
        write_train_log(out / "train_log.csv", earlier + result.log_rows)
    if result.halted:
        return outcome

    index = result.final_index()
    test_rows = ws.rows("test")
    if test_rows:
        per, summary, caps = evaluate(result.model, ws.data, test_rows, ws.vocab, index, cfg)
        outcome.per_image, outcome.summary, outcome.captions = per, summary, caps
    if out is not None:
        extra = {"schedule": schedule.to_json()} if schedule is not None else {}
        save_trainer(out / "model.dgcn", result.trainer, ws.vocab, **extra)
        write_metrics_csv(out / "test_metrics.csv", outcome.per_image)
        (out / "test_summary.json").write_text(json.dumps(outcome.summary, indent=2, sort_keys=True))
    return outcome


# -- CSV emission -----------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_rows(path, columns: Sequence[str], rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])
    return path


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_train_log(path, log_rows: Sequence[dict]) -> Path:
    rows = []
    for r in log_rows:
        if "phase" not in r:
            phase = "stage" if "stage" in r else "epoch"
            r = dict(r, phase=phase, index=r[phase])
        rows.append(r)
    return write_rows(path, LOG_COLUMNS, rows)


def write_metrics_csv(path, per_image: Sequence[dict]) -> Path:
    return write_rows(path, EVAL_COLUMNS, per_image)


# -- ablations and sweeps ---------------------------------------------------

def _ablation_job(job) -> dict:
    ws, cfg, table, label = job
    o = run_pipeline(ws, cfg, table=table, label=label)
    return dict(o.summary, variant=label, seed=cfg.seed, total_steps=o.total_steps)


def run_ablation(ws: Workspace, cfg: RunConfig, out_dir=None, map_fn: Callable = map) -> tuple[list[dict], list[dict]]:
    """Every variant of ``cfg.variants`` for every seed of ``cfg.seeds``, at one step budget.

    Curriculum variants of a seed share one difficulty table, scored by shard
    models of the configured encoder. Per-epoch validation is skipped.
    Returns ``(per_run_rows, median_rows)``.
    """
    variants = [AblationVariant.parse(v) for v in cfg.variants]
    jobs = []
    for seed in cfg.seeds:
        scfg = cfg.replace(seed=seed, eval_every_epoch=False)
        table = None
        if any(v.curriculum for v in variants):
            table = difficulty_table(ws, scfg.replace(curriculum=True), map_fn=map_fn)
        jobs.extend((ws, v.apply(scfg), table, v.label) for v in variants)
    runs = list(map_fn(_ablation_job, jobs))
    steps = {r["total_steps"] for r in runs}
    if len(steps) != 1:
        raise RuntimeError(f"ablation budgets differ across variants: {sorted(steps)}")
    medians = []
    for v in variants:
        mine = [r for r in runs if r["variant"] == v.label]
        row = {k: statistics.median(r[k] for r in mine) for k in METRIC_KEYS}
        row.update(variant=v.label, n_seeds=len(mine), total_steps=mine[0]["total_steps"],
                   seeds=";".join(str(r["seed"]) for r in mine),
                   bleu1_per_seed=";".join(repr(r["bleu1"]) for r in mine))
        medians.append(row)
    if out_dir is not None:
        write_rows(Path(out_dir) / "ablation_runs.csv", RUN_COLUMNS, runs)
        write_rows(Path(out_dir) / "ablation.csv", ABLATION_COLUMNS, medians)
    return runs, medians


SWEEP_PARAMS = ("K", "M")
SWEEP_COLUMNS = ("param", "value", "seed") + METRIC_KEYS + ("total_steps",)


def _sweep_job(job) -> dict:
    ws, cfg, param, value = job
    o = run_pipeline(ws, cfg)
    return dict(o.summary, param=param, value=value, seed=cfg.seed, total_steps=o.total_steps)


def run_sweep(ws: Workspace, cfg: RunConfig, param: str, values: Sequence[int], out_dir=None,
              map_fn: Callable = map) -> list[dict]:
    """One full pipeline run per value of ``K`` or ``M``; everything else fixed."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"can only sweep {SWEEP_PARAMS}, not {param!r}")
    n_train = len(ws.rows("train"))
    jobs = []
    for v in values:
        if param == "K" and not 1 <= v < n_train:
            raise ConfigError(f"K={v} needs 1 <= K < {n_train} training images")
        if param == "M" and not 2 <= v <= n_train:
            raise ConfigError(f"M={v} needs 2 <= M <= {n_train} training images")
        jobs.append((ws, validate(cfg.replace(**{param: int(v)})), param, int(v)))
    rows = list(map_fn(_sweep_job, jobs))
    if out_dir is not None:
        write_rows(Path(out_dir) / f"sweep_{param}.csv", SWEEP_COLUMNS, rows)
    return rows


def start_run_dir(cfg: RunConfig, out_dir=None) -> Path:
    out = Path(out_dir or cfg.out_dir)
    save_resolved(cfg, out)
    return out


__all__ = [
    "FEATURES_FILE", "CAPTIONS_FILE", "LOG_COLUMNS", "RUN_COLUMNS", "ABLATION_COLUMNS", "synthetic_spec",
    "make_corpus", "write_corpus", "load_corpus", "Workspace", "prepare", "worker_map", "difficulty_table",
    "make_schedule", "RunOutcome", "run_pipeline", "write_rows", "read_rows", "write_train_log",
    "write_metrics_csv", "run_ablation", "run_sweep", "SWEEP_COLUMNS", "start_run_dir",
]
