"""Command line entry point: ``ngat {synth,preprocess,sample-stats,train,eval}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, dump_config, load_config
from .evaluator import evaluate
from .graph import (
    GraphVanishedError,
    InteractionFormatError,
    InteractionGraph,
    SplitSpec,
    apply_k_core,
    load_interactions,
    split,
)
from .sampler import sample_stats
from .synthetic import PlantedBlocksSpec, generate_planted, write_pairs
from .trainer import train


def _caps(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def cmd_synth(args) -> int:
    spec = PlantedBlocksSpec(args.blocks, args.users, args.items, args.p_in, args.p_cross, args.seed)
    edges = generate_planted(spec)
    write_pairs(edges, args.out)
    print(f"wrote {len(edges)} edges to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    raw = load_interactions(args.input, args.format)
    filtered = apply_k_core(raw, args.k_core)
    graph = split(filtered, SplitSpec(args.train_frac, args.val_frac, args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    graph.save(out / "graph.ngig")
    for name, ids in (("user_ids.txt", filtered.user_ids), ("item_ids.txt", filtered.item_ids)):
        (out / name).write_text("".join(f"{dense} {orig}\n" for dense, orig in enumerate(ids.tolist())))
    summary = {
        "raw_edges": int(len(raw)),
        "kept_edges": int(len(filtered.edges)),
        "num_users": graph.num_users,
        "num_items": graph.num_items,
        "train_edges": graph.num_train_edges,
        "val_edges": graph.val_pos.num_edges,
        "test_edges": graph.test_pos.num_edges,
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_sample_stats(args) -> int:
    graph = InteractionGraph.load(args.graph)
    print(json.dumps(sample_stats(graph, _caps(args.max_neighbors), args.seed, args.epoch), sort_keys=True))
    return 0


def cmd_train(args) -> int:
    graph = InteractionGraph.load(args.graph)
    model_cfg, train_cfg, sampler_cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history_path = out / "history.jsonl"
    with open(history_path, "w", encoding="utf-8") as fh:
        def emit(entry):
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.flush()

        result = train(graph, model_cfg, train_cfg, sampler_cfg, on_evaluation=emit)
    result.checkpoint.save(out / "best.ngat")
    result.final_checkpoint.save(out / "last.ngat")
    (out / "epoch_losses.json").write_text(json.dumps(result.epoch_losses))
    (out / "resolved_config.txt").write_text(dump_config(model_cfg, train_cfg, sampler_cfg))
    print(json.dumps({"best_epoch": result.best_epoch, "stopped_early": result.stopped_early,
                      "epochs_run": len(result.epoch_losses)}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    graph = InteractionGraph.load(args.graph)
    ckpt = Checkpoint.load(args.checkpoint)
    report = evaluate(ckpt, graph, _caps(args.cutoffs), args.split, per_user=args.per_user)
    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ngat", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a planted-block pairs file")
    s.add_argument("--blocks", type=int, default=2)
    s.add_argument("--users", type=int, default=200, help="users per block")
    s.add_argument("--items", type=int, default=200, help="items per block")
    s.add_argument("--p-in", type=float, default=0.30)
    s.add_argument("--p-cross", type=float, default=0.01)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="k-core filter, split and snapshot an interaction file")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=["pairs", "adjacency"], default="pairs")
    s.add_argument("--k-core", type=int, default=10)
    s.add_argument("--train-frac", type=float, default=0.8)
    s.add_argument("--val-frac", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("sample-stats", help="per-hop kept-edge counts of one Max-M sample")
    s.add_argument("--graph", required=True)
    s.add_argument("--max-neighbors", default="120,120,120")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epoch", type=int, default=0)
    s.set_defaults(func=cmd_sample_stats)

    s = sub.add_parser("train", help="train from a graph snapshot and a key=value config")
    s.add_argument("--graph", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="all-ranking recall/NDCG of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--graph", required=True)
    s.add_argument("--split", choices=["validation", "test"], default="test")
    s.add_argument("--cutoffs", default="20")
    s.add_argument("--report")
    s.add_argument("--per-user", action="store_true")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (GraphVanishedError, InteractionFormatError, ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"ngat {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
