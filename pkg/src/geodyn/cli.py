"""Command-line entry point: ``geodyn <subcommand> ...``.

Exit codes: 0 success, 1 invalid input or configuration, 2 internal error.
Every run validates its inputs before creating ``--out`` and then writes
``resolved_config.json`` and ``log.jsonl`` there.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import synth
from .fusion import FusionConfig, load_fusion, load_photometric_features, train_fusion
from .graph import load_graph
from .landmarks import MovementClassMap, load_manifest, load_sequences, movement_label, select_split
from .protocol import ModelBundle, ProtocolConfig, run_protocol, write_report, write_scores
from .stgcn import (GcnTrainConfig, load_model, miniature_grad_check, node_activations, train_gcn,
                    write_activations)

log = logging.getLogger("geodyn")

CONFIG_FILE = "resolved_config.json"
LOG_FILE = "log.jsonl"
CHECKPOINT = "best.json"


class UsageError(Exception):
    """Bad flags, config keys or input files; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise UsageError(f"{path}: config must be an object")
    return obj


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class _RunLog:
    def __init__(self, out: Path):
        self.path = out / LOG_FILE
        self.path.write_text("", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _start_run(out, resolved: dict) -> tuple[Path, _RunLog]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / CONFIG_FILE, resolved)
    return out, _RunLog(out)


# -- data loading ----------------------------------------------------------------

def _load_data(data_dir, graph_path=None):
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise UsageError(f"data directory not found: {data_dir}")
    graph_path = Path(graph_path) if graph_path else data_dir / synth.GRAPH_FILE
    for p in (graph_path, data_dir / synth.LANDMARK_FILE, data_dir / synth.MANIFEST_FILE):
        if not p.is_file():
            raise UsageError(f"missing input file: {p}")
    graph = load_graph(graph_path)
    seqs = load_sequences(data_dir / synth.LANDMARK_FILE, graph.num_nodes)
    splits = load_manifest(data_dir / synth.MANIFEST_FILE)
    return graph, graph_path, seqs, splits


def _load_features(data_dir):
    path = Path(data_dir) / synth.FEATURE_FILE
    if not path.is_file():
        raise UsageError(f"missing photometric feature file: {path}")
    return load_photometric_features(path)


def _require_split(seqs, splits, name):
    out = select_split(seqs, splits, name)
    if not out:
        raise UsageError(f"split {name!r} is empty or missing from the manifest")
    return out


# -- subcommands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    obj = _read_json(args.config)
    if args.seed is not None:
        obj["seed"] = args.seed
    config = synth.SynthConfig.from_dict(obj)
    data = synth.synthesize(config)
    out, run_log = _start_run(args.out, {"command": "synth", "synth": asdict(config)})
    synth.write_dataset(data, out, config.decimals)
    counts = {}
    for s in data.sequences:
        counts[s.label] = counts.get(s.label, 0) + 1
    run_log({"sequences": len(data.sequences), "counts": counts})
    return 0


def cmd_train_gcn(args) -> int:
    obj = _read_json(args.config)
    if args.epochs is not None:
        obj["epochs"] = args.epochs
    config = GcnTrainConfig.from_dict(obj)
    graph, graph_path, seqs, splits = _load_data(args.data, args.graph)
    train = _require_split(seqs, splits, args.train_split)
    dev = select_split(seqs, splits, args.dev_split)
    class_map = MovementClassMap.from_dict(config.class_map)
    for s in train + dev:
        movement_label(s.label, class_map)
    if len({movement_label(s.label, class_map)[0] for s in train}) < 2:
        raise UsageError("training split contains a single movement class")
    resolved = {"command": "train-gcn", "seed": args.seed, "train": asdict(config),
                "splits": {"train": args.train_split, "dev": args.dev_split},
                "inputs": {"landmarks": _file_digest(Path(args.data) / synth.LANDMARK_FILE),
                           "graph": graph.digest()}}
    out, run_log = _start_run(args.out, resolved)
    model, history = train_gcn(train, dev, graph, config, np.random.default_rng(args.seed),
                               on_epoch=run_log)
    model.save(out / CHECKPOINT, train=asdict(config), seed=args.seed,
               best_epoch=model.best_epoch, inputs=resolved["inputs"])
    return 0


def cmd_train_fusion(args) -> int:
    obj = _read_json(args.config)
    if args.epochs is not None:
        obj["epochs"] = args.epochs
    config = FusionConfig.from_dict(obj)
    gcn, gcn_meta = load_model(args.gcn)
    _, _, seqs, splits = _load_data(args.data, args.graph)
    features = _load_features(args.data)
    train = _require_split(seqs, splits, args.train_split)
    dev = _require_split(seqs, splits, args.dev_split)
    missing = [s.id for s in train + dev if s.id not in features]
    if missing:
        raise UsageError(f"no photometric feature for id {missing[0]!r}")
    resolved = {"command": "train-fusion", "seed": args.seed, "fusion": asdict(config),
                "gcn_config_hash": gcn_meta["config_hash"],
                "splits": {"train": args.train_split, "dev": args.dev_split},
                "inputs": {"landmarks": _file_digest(Path(args.data) / synth.LANDMARK_FILE),
                           "features": _file_digest(Path(args.data) / synth.FEATURE_FILE)}}
    out, run_log = _start_run(args.out, resolved)
    model, _ = train_fusion(gcn, features, train, dev, config, np.random.default_rng(args.seed),
                            on_epoch=run_log)
    model.save(out / CHECKPOINT, seed=args.seed, gcn_config_hash=gcn_meta["config_hash"],
               inputs=resolved["inputs"])
    return 0


def cmd_eval(args) -> int:
    proto = ProtocolConfig.from_dict({
        **_read_json(args.config),
        **{k: v for k, v in {"score_source": "fusion" if args.fusion else None,
                             "threshold_policy": args.threshold_policy,
                             "threshold": args.threshold, "test_split": args.split,
                             "dev_split": args.dev_split}.items() if v is not None}})
    gcn, gcn_meta = load_model(args.checkpoint)
    fusion, fusion_meta = load_fusion(args.fusion) if args.fusion else (None, {})
    _, _, seqs, splits = _load_data(args.data, args.graph)
    _require_split(seqs, splits, proto.test_split)
    if proto.threshold_policy == "eer-dev":
        _require_split(seqs, splits, proto.dev_split)
    features = _load_features(args.data) if proto.score_source == "fusion" else None
    bundle = ModelBundle(gcn, fusion, gcn_meta, fusion_meta)
    report, records = run_protocol(bundle, seqs, splits, proto, features)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval-{proto.test_split}"
    out, run_log = _start_run(out, {"command": "eval", "protocol": asdict(proto)})
    write_report(report, out / "report.json")
    write_scores(records, out / "scores.csv")
    run_log({"auc": report.auc, "acer": report.acer, "hter": report.hter,
             "threshold": report.threshold})
    return 0


def cmd_gradcheck(args) -> int:
    if args.seeds < 1:
        raise UsageError("--seeds must be positive")
    errors = [miniature_grad_check(seed) for seed in range(args.seeds)]
    worst = max(errors)
    passed = worst < args.tolerance
    if args.out:
        _, run_log = _start_run(args.out, {"command": "gradcheck", "seeds": args.seeds,
                                           "tolerance": args.tolerance})
        for seed, err in enumerate(errors):
            run_log({"seed": seed, "max_rel_error": err})
    print(f"gradcheck max relative error {worst:.3e} over {args.seeds} seeds: "
          f"{'PASS' if passed else 'FAIL'}")
    if not passed:
        print("gradient check exceeded tolerance", file=sys.stderr)
        return 1
    return 0


def cmd_activations(args) -> int:
    model, _ = load_model(args.checkpoint)
    _, _, seqs, _ = _load_data(args.data, args.graph)
    chosen = [s for s in seqs if s.id == args.id]
    if not chosen:
        raise UsageError(f"no sequence with id {args.id!r}")
    out, run_log = _start_run(args.out, {"command": "activations", "id": args.id,
                                         "checkpoint_config_hash": model.metadata()["config_hash"]})
    acts = node_activations(model, chosen[0])
    write_activations(acts, out / "activations.csv")
    run_log({"id": args.id, "nodes": int(acts.shape[0]), "steps": int(acts.shape[1])})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geodyn", description="Geometric liveness pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-gcn", help="train the geometric branch")
    p.add_argument("--data", required=True)
    p.add_argument("--graph", help="graph file (default: <data>/graph.json)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--train-split", default="train")
    p.add_argument("--dev-split", default="dev")
    p.set_defaults(func=cmd_train_gcn)

    p = sub.add_parser("train-fusion", help="train the fusion module on frozen features")
    p.add_argument("--data", required=True)
    p.add_argument("--gcn", required=True, help="geometric checkpoint")
    p.add_argument("--graph")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--train-split", default="train")
    p.add_argument("--dev-split", default="dev")
    p.set_defaults(func=cmd_train_fusion)

    p = sub.add_parser("eval", help="score a split and write a report")
    p.add_argument("--checkpoint", required=True, help="geometric checkpoint")
    p.add_argument("--fusion", help="fusion checkpoint; scores with the fused model")
    p.add_argument("--data", required=True)
    p.add_argument("--graph")
    p.add_argument("--split", default=None)
    p.add_argument("--dev-split", default=None)
    p.add_argument("--threshold-policy", choices=["fixed", "eer-dev", "eer-test"])
    p.add_argument("--threshold", type=float)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of a miniature network")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("activations", help="export per-node activations for one sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--graph")
    p.add_argument("--id", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_activations)
    return parser


def _thread_cap() -> int:
    raw = os.environ.get("GEODYN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"GEODYN_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("GEODYN_THREADS must be at least 1")
    return n


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with threadpool_limits(limits=_thread_cap()):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
