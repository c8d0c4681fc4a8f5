"""Cross-review difficulty scoring and easy-to-hard stage scheduling."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .data_io.vocab import Vocabulary
from .metrics import difficulty_metric
from .model import SceneTensors, build_neighbor_index
from .training import (DivergenceError, Trainer, TrainResult, build_model, caption_rows, evaluate,
                       restore_model, save_model, steps_for)

log = logging.getLogger(__name__)


@dataclass
class ShardPlan:
    M: int
    assignment: dict[int, int]
    seed: int

    def shard(self, i: int) -> list[int]:
        return sorted(s for s, k in self.assignment.items() if k == i)

    def sizes(self) -> list[int]:
        return [len(self.shard(i)) for i in range(self.M)]


def make_shards(sample_ids: Sequence[int], M: int, seed: int = 0) -> ShardPlan:
    """Seeded uniform partition into ``M`` shards whose sizes differ by at most one."""
    ids = list(sample_ids)
    if M < 2:
        raise ValueError("need at least two shards for cross-review")
    if M > len(ids):
        raise ValueError(f"M={M} exceeds dataset size {len(ids)}")
    perm = np.random.default_rng([seed, 104729]).permutation(len(ids))
    assignment = {int(ids[p]): pos % M for pos, p in enumerate(perm)}
    return ShardPlan(M, assignment, seed)


@dataclass
class DifficultyEntry:
    sample_id: int
    shard_id: int
    scores: list[tuple[int, float]]   # (scorer shard id, metric value)

    @property
    def ds(self) -> float:
        return difficulty_score([m for _, m in self.scores])


def difficulty_score(metric_values: Sequence[float]) -> float:
    """Mean of ``1 - metric`` over the cross-review scorers."""
    if not metric_values:
        raise ValueError("no scorer values")
    return float(sum(1.0 - m for m in metric_values) / len(metric_values))


@dataclass
class DifficultyTable:
    M: int
    entries: dict[int, DifficultyEntry] = field(default_factory=dict)

    def ds(self) -> dict[int, float]:
        return {k: e.ds for k, e in self.entries.items()}

    def validate(self) -> None:
        for e in self.entries.values():
            scorers = [k for k, _ in e.scores]
            if e.shard_id in scorers:
                raise ValueError(f"sample {e.sample_id} was scored by its home shard")
            if len(scorers) != self.M - 1 or len(set(scorers)) != len(scorers):
                raise ValueError(f"sample {e.sample_id} has {len(scorers)} scorers, expected {self.M - 1}")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "shard_id", "DS"] + [f"metric_{k}" for k in range(1, self.M)]
                       + [f"scorer_{k}" for k in range(1, self.M)])
            for sid in sorted(self.entries):
                e = self.entries[sid]
                w.writerow([sid, e.shard_id, repr(e.ds)] + [repr(m) for _, m in e.scores]
                           + [k for k, _ in e.scores])

    @classmethod
    def read_csv(cls, path) -> "DifficultyTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path} holds no difficulty rows")
        m = sum(1 for k in rows[0] if k.startswith("metric_")) + 1
        table = cls(m)
        for r in rows:
            scores = [(int(r[f"scorer_{k}"]), float(r[f"metric_{k}"])) for k in range(1, m)]
            table.entries[int(r["sample_id"])] = DifficultyEntry(int(r["sample_id"]), int(r["shard_id"]), scores)
        return table


def train_shard_models(plan: ShardPlan, data: SceneTensors, cfg: RunConfig, vocab: Vocabulary,
                       out_dir=None, map_fn: Callable = map) -> list[dict]:
    """Train one model per shard on that shard alone.

    Returns per-shard records ``{shard, checkpoint, rows_seen, initial_loss, final_loss}``.
    ``map_fn`` may be a worker pool's ``map``; each job is independent.
    """
    jobs = [(i, plan, data, cfg, vocab, out_dir) for i in range(plan.M)]
    return list(map_fn(_train_one_shard, jobs))


def _train_one_shard(job) -> dict:
    i, plan, data, cfg, vocab, out_dir = job
    rows = [data.index[s] for s in plan.shard(i)]
    model = build_model(cfg, len(vocab), seed=cfg.seed * 1000 + 17 * (i + 1))
    n_steps = steps_for(cfg.shard_epochs, len(rows), cfg.batch_size)
    trainer = Trainer(model, data, rows, cfg, n_steps, seed=cfg.seed * 1000 + i)
    trainer.stage = f"shard-{i}"
    losses = trainer.run(rows, n_steps)
    trainer.refresh_neighbors()
    rec = {"shard": i, "rows_seen": sorted(trainer.seen_rows), "initial_loss": losses[0],
           "final_loss": float(np.mean(losses[-max(1, len(losses) // 10):])), "steps": trainer.step}
    if out_dir is not None:
        path = Path(out_dir) / f"shard_{i}.dgcn"
        save_model(path, model, cfg, vocab, trainer.opt, trainer.index, shard_id=i, M=plan.M)
        rec["checkpoint"] = str(path)
    else:
        rec["model"] = model
        rec["index"] = trainer.index
    return rec


def cross_review(plan: ShardPlan, data: SceneTensors, shard_records: Sequence[dict], vocab: Vocabulary,
                 metric_spec: str, max_len: int = 20) -> DifficultyTable:
    """Score every sample with each shard model that never trained on it (greedy captions)."""
    if len(shard_records) != plan.M:
        raise ValueError(f"expected {plan.M} shard models, got {len(shard_records)}")
    by_shard = {r["shard"]: r for r in shard_records}
    missing = set(range(plan.M)) - set(by_shard)
    if missing:
        raise FileNotFoundError(f"missing checkpoint for shards {sorted(missing)}")
    table = DifficultyTable(plan.M)
    for sid, home in plan.assignment.items():
        table.entries[sid] = DifficultyEntry(sid, home, [])
    for k in range(plan.M):
        rec = by_shard[k]
        if "model" in rec:
            model, index = rec["model"], rec["index"]
        else:
            model, _, _, index = restore_model(rec["checkpoint"])
        targets = sorted(s for s, home in plan.assignment.items() if home != k)
        rows = [data.index[s] for s in targets]
        states = caption_rows(model, data, rows, index, max_len)
        for sid, row, st in zip(targets, rows, states):
            value = difficulty_metric(vocab.decode(st.tokens), data.references[row], metric_spec)
            table.entries[sid].scores.append((k, value))
    table.validate()
    return table


@dataclass
class CurriculumSchedule:
    mode: str
    M: int
    seed: int
    order: list[int]                    # sample ids, easiest first
    buckets: list[list[int]]
    stages: list[list[int]]             # C_1..C_{M+1}

    def bucket_boundaries(self) -> list[int]:
        return [int(x) for x in np.cumsum([len(b) for b in self.buckets])[:-1]]

    def to_json(self) -> str:
        return json.dumps({"mode": self.mode, "M": self.M, "seed": self.seed, "order": self.order,
                           "bucket_boundaries": self.bucket_boundaries(), "stages": self.stages}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "CurriculumSchedule":
        d = json.loads(text)
        cuts = [0] + list(d["bucket_boundaries"]) + [len(d["order"])]
        buckets = [d["order"][a:b] for a, b in zip(cuts[:-1], cuts[1:])]
        return cls(d["mode"], d["M"], d["seed"], d["order"], buckets, d["stages"])


def _split_sizes(n: int, parts: int) -> list[int]:
    """Floor division with the remainder going to the last part."""
    base = n // parts
    return [base] * (parts - 1) + [n - base * (parts - 1)]


def build_schedule(ds: dict[int, float], M: int, seed: int = 0, mode: str = "literal") -> CurriculumSchedule:
    """Sort by difficulty (ties by id), cut into ``M`` contiguous buckets, compose stages.

    literal: stage ``C_i`` takes a disjoint ``1/M`` share of every bucket.
    cumulative: bucket ``U_k`` gives ``floor(|U_k| / (M-k+1))`` samples to each
    of stages ``k..M`` in easy-to-hard order, so stage ``C_i`` only draws from
    ``U_1..U_i``. Equal shares keep stage mean difficulty non-decreasing; the
    few leftover samples of each bucket are only seen in ``C_{M+1}``.
    Both append the full dataset as stage ``C_{M+1}``; every stage is shuffled.
    """
    if mode not in ("literal", "cumulative"):
        raise ValueError(f"unknown schedule mode {mode!r}")
    if M < 1:
        raise ValueError("M must be >= 1")
    order = sorted(ds, key=lambda s: (ds[s], s))
    buckets = [list(map(int, b)) for b in np.array_split(np.asarray(order, dtype=np.int64), M)]
    rng = np.random.default_rng([seed, 15485863])
    stages: list[list[int]] = [[] for _ in range(M)]
    for k, bucket in enumerate(buckets):
        if mode == "literal":
            shuffled = [bucket[i] for i in rng.permutation(len(bucket))]
            targets = list(range(M))
            pieces = _split_sizes(len(shuffled), M)
        else:
            shuffled = bucket
            targets = list(range(k, M))
            pieces = [len(bucket) // (M - k)] * (M - k)
        start = 0
        for stage, size in zip(targets, pieces):
            stages[stage].extend(shuffled[start:start + size])
            start += size
    stages.append(list(order))
    stages = [[s[i] for i in rng.permutation(len(s))] for s in stages]
    return CurriculumSchedule(mode, M, seed, list(order), buckets, stages)


def allocate_steps(stage_sizes: Sequence[int], total_steps: int) -> list[int]:
    """Split a step budget proportionally to stage sizes (largest remainder), summing exactly."""
    sizes = np.asarray(stage_sizes, dtype=np.float64)
    raw = total_steps * sizes / sizes.sum()
    steps = np.floor(raw).astype(int)
    rest = total_steps - steps.sum()
    for i in np.argsort(-(raw - steps), kind="stable")[:rest]:
        steps[i] += 1
    return steps.tolist()


def _halt_at(cfg: RunConfig, total: int) -> int:
    return min(total, cfg.halt_after_steps) if cfg.halt_after_steps else total


def _val_row(result: TrainResult, data, val_rows, vocab, cfg) -> dict:
    if val_rows is None or not len(val_rows) or not cfg.eval_every_epoch:
        return {}
    t = result.trainer
    # a separate index, so logging validation scores never changes training
    index = build_neighbor_index(t.model, data, t.corpus_rows) if t.model.uses_neighbors else None
    _, summary, _ = evaluate(t.model, data, val_rows, vocab, index, cfg)
    return {f"val_{k}": v for k, v in summary.items()}


def curriculum_train(schedule: CurriculumSchedule, data: SceneTensors, train_rows: Sequence[int], cfg: RunConfig,
                     vocab: Vocabulary, val_rows: Sequence[int] | None = None, seed: int | None = None,
                     total_steps: int | None = None, trainer: Trainer | None = None,
                     on_checkpoint: Callable[[TrainResult], None] | None = None) -> TrainResult:
    """Train through ``C_1..C_{M+1}`` in order; one log row per stage.

    ``cfg.stage_budget`` splits the step budget across stages, either in
    proportion to stage size or evenly. A resumed ``trainer`` skips the steps it has already taken.
    """
    seed = cfg.seed if seed is None else seed
    if trainer is None:
        total = total_steps or steps_for(cfg.epochs, len(train_rows), cfg.batch_size)
        trainer = Trainer(build_model(cfg, len(vocab), seed), data, train_rows, cfg, total, seed)
    total = trainer.total_steps
    halt = _halt_at(cfg, total)
    result = TrainResult(trainer.model, trainer)
    sizes = [len(s) for s in schedule.stages]
    weights = sizes if cfg.stage_budget == "equal_epochs" else [min(n, 1) for n in sizes]
    budget = allocate_steps(weights, total)
    start = 0
    for i, (stage, n_steps) in enumerate(zip(schedule.stages, budget), start=1):
        end = start + n_steps
        todo = max(0, min(end, halt) - max(start, trainer.step))
        if n_steps and trainer.step >= end:
            start = end
            continue
        trainer.stage = i
        rows = [data.index[s] for s in stage]
        if todo:
            trainer.run(rows, todo)
        if trainer.step < end:
            result.halted = True
            if on_checkpoint:
                on_checkpoint(result)
            return result
        losses = trainer.losses[start:end]
        row = {"stage": i, "n_samples": len(stage), "steps": n_steps, "total_steps": trainer.step,
               "loss": float(np.mean(losses)) if losses else float("nan")}
        row.update(_val_row(result, data, val_rows, vocab, cfg))
        result.log_rows.append(row)
        log.info("stage %d/%d: %s", i, len(schedule.stages), row)
        if on_checkpoint:
            on_checkpoint(result)
        start = end
    return result


def plain_train(data: SceneTensors, train_rows: Sequence[int], cfg: RunConfig, vocab: Vocabulary,
                val_rows: Sequence[int] | None = None, seed: int | None = None,
                total_steps: int | None = None, trainer: Trainer | None = None,
                on_checkpoint: Callable[[TrainResult], None] | None = None) -> TrainResult:
    """Non-curriculum baseline; one log row per epoch."""
    seed = cfg.seed if seed is None else seed
    if trainer is None:
        total = total_steps or steps_for(cfg.epochs, len(train_rows), cfg.batch_size)
        trainer = Trainer(build_model(cfg, len(vocab), seed), data, train_rows, cfg, total, seed)
    total = trainer.total_steps
    halt = _halt_at(cfg, total)
    result = TrainResult(trainer.model, trainer)
    spe = trainer.steps_per_epoch
    while trainer.step < total:
        epoch = trainer.step // spe + 1
        trainer.stage = f"epoch-{epoch}"
        end = min(epoch * spe, total)
        trainer.run(train_rows, min(end, halt) - trainer.step)
        if trainer.step < end:
            result.halted = True
            if on_checkpoint:
                on_checkpoint(result)
            return result
        losses = trainer.losses[(epoch - 1) * spe:end]
        row = {"epoch": epoch, "steps": len(losses), "total_steps": trainer.step, "loss": float(np.mean(losses))}
        row.update(_val_row(result, data, val_rows, vocab, cfg))
        result.log_rows.append(row)
        log.info("epoch %d: %s", epoch, row)
        if on_checkpoint:
            on_checkpoint(result)
    return result


__all__ = [
    "ShardPlan", "make_shards", "DifficultyEntry", "DifficultyTable", "difficulty_score", "train_shard_models",
    "cross_review", "CurriculumSchedule", "build_schedule", "allocate_steps", "curriculum_train", "plain_train",
    "DivergenceError",
]
