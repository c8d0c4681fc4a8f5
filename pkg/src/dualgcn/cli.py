"""``dgcn`` command line: data generation, training, captioning, evaluation, experiments."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import PROFILES, ConfigError, resolve_config, save_resolved
from .curriculum import DifficultyTable, build_schedule
from .data_io import FormatError, load_region_features, read_captions
from .experiments import (FEATURES_FILE, difficulty_table, make_corpus, prepare, run_ablation, run_pipeline,
                          run_sweep, worker_map, write_corpus, write_metrics_csv)
from .metrics import evaluate_corpus
from .model import SceneTensors
from .training import DivergenceError, caption_rows, restore_model

log = logging.getLogger("dualgcn")


class CommandError(RuntimeError):
    pass


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", default="toy", choices=sorted(PROFILES), help="default sizes (default: toy)")
    p.add_argument("--config", help="JSON or YAML file layered over the profile")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field; repeatable")
    p.add_argument("--seed", type=int, help="run seed (DGCN_SEED still wins)")
    p.add_argument("--workers", type=int, help="worker processes for shard models and experiments")
    p.add_argument("--data-dir", help="directory holding regions.dgrf and captions.jsonl")
    p.add_argument("--out", help="output directory")


def _config(args):
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    for key in ("seed", "workers", "data_dir"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    return resolve_config(args.profile, args.config, overrides)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    samples = make_corpus(cfg)
    feats, caps = write_corpus(samples, cfg.out_dir)
    save_resolved(cfg, cfg.out_dir)
    print(f"wrote {len(samples)} scenes to {feats} and {caps}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    save_resolved(cfg, cfg.out_dir)
    ws = prepare(cfg)
    with worker_map(cfg.workers) as map_fn:
        outcome = run_pipeline(ws, cfg, cfg.out_dir, resume=args.resume, map_fn=map_fn)
    status = "halted" if outcome.result.halted else "finished"
    print(f"{status} at step {outcome.total_steps}; outputs in {cfg.out_dir}")
    if outcome.summary:
        print(json.dumps(outcome.summary, sort_keys=True))
    return 0


def _caption_records(model, vocab, index, samples, cfg, beam: int, max_len: int) -> list[dict]:
    if not samples:
        return []
    data = SceneTensors.build(samples, vocab, cfg.model_config())
    states = caption_rows(model, data, range(len(samples)), index, max_len, beam, cfg.length_alpha)
    out = []
    for s, st in zip(samples, states):
        toks = st.tokens[1:]
        out.append({"image_id": int(s.id), "caption": vocab.decode(st.tokens),
                    "tokens": [vocab.itos[t] for t in toks], "logprobs": [float(x) for x in st.logprobs],
                    "score": st.score})
    return out


def cmd_caption(args) -> int:
    model, cfg, vocab, index = restore_model(args.checkpoint)
    samples = load_region_features(args.features, args.references, cfg.max_regions)
    beam = args.beam if args.beam is not None else cfg.beam
    max_len = args.max_len or cfg.max_len
    records = _caption_records(model, vocab, index, samples, cfg, beam, max_len)
    text = "".join(json.dumps(r) + "\n" for r in records)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    if bool(args.captions) == bool(args.checkpoint):
        raise CommandError("eval needs exactly one of --captions or --checkpoint")
    if args.captions:
        if not args.references:
            raise CommandError("--captions needs --references (the caption sidecar)")
        refs = read_captions(args.references)
        cands = [json.loads(line) for line in Path(args.captions).read_text().splitlines() if line.strip()]
        missing = [c["image_id"] for c in cands if c["image_id"] not in refs]
        if missing:
            raise CommandError(f"no references for image ids {missing[:5]}")
        ids = [c["image_id"] for c in cands]
        rows = evaluate_corpus(ids, [c["caption"] for c in cands], [refs[i]["refs"] for i in ids])
    else:
        model, cfg, vocab, index = restore_model(args.checkpoint)
        data_dir = Path(args.data_dir or cfg.data_dir)
        samples = load_region_features(data_dir / FEATURES_FILE, data_dir / "captions.jsonl", cfg.max_regions)
        samples = [s for s in samples if s.split == args.split]
        records = _caption_records(model, vocab, index, samples, cfg, cfg.beam, cfg.max_len)
        rows = evaluate_corpus([r["image_id"] for r in records], [r["caption"] for r in records],
                               [s.references for s in samples])
    out = Path(args.out)
    write_metrics_csv(out, rows)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def cmd_cross_review(args) -> int:
    cfg = _config(args)
    save_resolved(cfg, cfg.out_dir)
    ws = prepare(cfg)
    with worker_map(cfg.workers) as map_fn:
        table = difficulty_table(ws, cfg, cfg.out_dir, map_fn)
    ds = np.array(list(table.ds().values()))
    print(f"scored {len(ds)} samples with M={cfg.M}; DS mean {ds.mean():.4f}; "
          f"table in {Path(cfg.out_dir) / 'difficulty.csv'}")
    return 0


def cmd_schedule(args) -> int:
    cfg = _config(args)
    table = DifficultyTable.read_csv(args.difficulty)
    schedule = build_schedule(table.ds(), table.M, cfg.seed, args.mode or cfg.schedule_mode)
    out = Path(args.out_file or Path(cfg.out_dir) / "schedule.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(schedule.to_json())
    print(f"{schedule.mode} schedule: stage sizes {[len(s) for s in schedule.stages]} -> {out}")
    return 0


def cmd_ablate(args) -> int:
    overrides = {}
    if args.variants:
        overrides["variants"] = args.variants
    if args.seeds:
        overrides["seeds"] = args.seeds
    args.set = args.set + [f"{k}={v}" for k, v in overrides.items()]
    cfg = _config(args)
    save_resolved(cfg, cfg.out_dir)
    ws = prepare(cfg)
    with worker_map(cfg.workers) as map_fn:
        _, medians = run_ablation(ws, cfg, cfg.out_dir, map_fn)
    for r in medians:
        print(f"{r['variant']:<32} BLEU-1 {r['bleu1']:6.2f}  BLEU-4 {r['bleu4']:6.2f}  CIDEr {r['cider']:7.2f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    save_resolved(cfg, cfg.out_dir)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"--values must be comma-separated integers: {e}") from e
    ws = prepare(cfg)
    with worker_map(cfg.workers) as map_fn:
        rows = run_sweep(ws, cfg, args.param, values, cfg.out_dir, map_fn)
    for r in rows:
        print(f"{r['param']}={r['value']}: BLEU-1 {r['bleu1']:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgcn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus as DGRF + JSONL")
    _add_config_args(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train (plain or curriculum) and score the test split")
    _add_config_args(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="caption images from a DGRF file as JSON lines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--references", help="caption sidecar (only used for split labels)")
    p.add_argument("--beam", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", help="per-image BLEU/ROUGE-L/CIDEr CSV")
    p.add_argument("--captions", help="JSONL written by `dgcn caption`")
    p.add_argument("--references", help="caption sidecar with reference captions")
    p.add_argument("--checkpoint", help="caption a split with this checkpoint instead")
    p.add_argument("--data-dir")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cross-review", help="train shard models and write the difficulty table")
    _add_config_args(p)
    p.set_defaults(func=cmd_cross_review)

    p = sub.add_parser("schedule", help="turn a difficulty table into stage lists")
    _add_config_args(p)
    p.add_argument("--difficulty", required=True, help="difficulty CSV")
    p.add_argument("--mode", choices=("literal", "cumulative"))
    p.add_argument("--out-file", help="schedule JSON path (default: <out>/schedule.json)")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("ablate", help="ablation variants over several seeds at one budget")
    _add_config_args(p)
    p.add_argument("--variants", help="comma-separated variant labels")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="one run per value of K or M")
    _add_config_args(p)
    p.add_argument("--param", required=True, choices=("K", "M"))
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"dgcn: config error: {e}", file=sys.stderr)
        return 2
    except (CommandError, DivergenceError, CheckpointError, FormatError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"dgcn {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
