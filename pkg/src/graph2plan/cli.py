"""Command-line interface: gen-data, train, eval, predict, inspect-graph.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError, config_hash, load_checkpoint
from .datasetgen import (
    SPLITS,
    InfeasibleError,
    NavSample,
    SizeParams,
    build_corpus,
    read_jsonl,
    split_path,
    tokenize,
    write_corpus,
)
from .graph import (
    BehavioralGraph,
    GraphError,
    PlanError,
    execute_plan,
    graph_from_dict,
    nodes_by_name,
)
from .model import NumericError, predict
from .training import MAX_DECODE_STEPS, TrainConfig, evaluate, train

log = logging.getLogger("graph2plan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ENV = "GRAPH2PLAN_DATA"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    started: float = 0.0
    wall_clock_seconds: float = 0.0
    hashes: dict[str, str] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def finish(self) -> None:
        self.wall_clock_seconds = time.time() - self.started
        self.hashes = {p: file_sha256(p) for p in self.inputs + self.outputs if Path(p).is_file()}


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_manifest(manifest: RunManifest, path: Path) -> None:
    manifest.finish()
    atomic_write_text(path, json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_ENV, "data"))


def _existing(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _load_split(data_dir: Path, split: str) -> list[NavSample]:
    return read_jsonl(_existing(split_path(data_dir, split), f"{split} split"))


def _load_graph(path: str | Path) -> BehavioralGraph:
    p = _existing(path, "graph file")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{p}: bad JSON ({exc})") from None
    return graph_from_dict(doc)


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out) if args.out else default_data_dir()
    manifest = RunManifest("gen-data", {}, args.seed, started=time.time())
    sizes = SizeParams(max_triplets=args.graph_max_triplets)
    corpus = build_corpus(
        n_envs=args.envs,
        samples_per_env=args.samples,
        double_fraction=args.double_fraction,
        seed=args.seed,
        size_params=sizes,
        new_env_fraction=args.new_env_fraction,
        heldout_fraction=args.heldout_fraction,
    )
    info = write_corpus(corpus, out)
    manifest.config = info["params"]
    manifest.outputs = [str(split_path(out, s)) for s in SPLITS]
    manifest.extra = info
    write_manifest(manifest, out / "manifest.json")
    for split, counts in info["counts"].items():
        print(f"{split}: {counts['total']} samples ({counts['single']} single, {counts['double']} double)")
    return EXIT_OK


def cmd_train(args) -> int:
    data = Path(args.data) if args.data else default_data_dir()
    config = TrainConfig.load(_existing(args.config, "config file")) if args.config else TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.max_triplets is not None:
        overrides["max_triplets"] = args.max_triplets
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    config = replace(config, **overrides)
    out = Path(args.out) if args.out else data / "run"
    manifest = RunManifest("train", asdict(config), config.seed, started=time.time())
    train_split = _load_split(data, "train")
    valid = _load_split(data, "test-repeated")
    manifest.inputs = [str(split_path(data, "train")), str(split_path(data, "test-repeated"))]
    if args.word_vectors:
        manifest.inputs.append(str(_existing(args.word_vectors, "word-vector file")))
    state = train(train_split, valid, config, out, word_vectors_path=args.word_vectors)
    manifest.outputs = [str(out / "best.pt"), str(out / "last.pt"), str(out / "train_log.jsonl")]
    manifest.extra = {
        "config_hash": config_hash(config),
        "best_epoch": state.best_epoch,
        "best_GM": 100.0 * state.best_gm,
        "final": state.history[-1],
    }
    write_manifest(manifest, out / "manifest.json")
    last = state.history[-1]
    print(
        f"trained {state.epoch} epochs; best GM {100 * state.best_gm:.2f} at epoch {state.best_epoch}; "
        f"last EM {last['EM']:.2f} GM {last['GM']:.2f}"
    )
    return EXIT_OK


def _checkpoint(args):
    try:
        model, vocab, config, extra = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    except CheckpointError as exc:
        raise DataError(str(exc)) from None
    if getattr(args, "config", None):
        expected = TrainConfig.load(_existing(args.config, "config file"))
        if config_hash(expected) != config_hash(config):
            raise DataError(
                f"checkpoint/config hash mismatch: {args.checkpoint} has {config_hash(config)}, "
                f"{args.config} has {config_hash(expected)}"
            )
    return model, vocab, config


def cmd_eval(args) -> int:
    data = Path(args.data) if args.data else default_data_dir()
    model, vocab, config = _checkpoint(args)
    max_triplets = args.max_triplets or config.max_triplets
    samples = _load_split(data, args.split)
    manifest = RunManifest("eval", asdict(config), config.seed, started=time.time())
    manifest.inputs = [str(args.checkpoint), str(split_path(data, args.split))]
    report = evaluate(model, samples, vocab, max_triplets)
    doc = report.to_dict(args.split, per_sample=args.per_sample)
    text = json.dumps(doc, indent=2)
    out = Path(args.out) if args.out else data / "runs"
    report_path = out / f"eval-{args.split}.json"
    atomic_write_text(report_path, text + "\n")
    manifest.outputs = [str(report_path)]
    write_manifest(manifest, out / f"eval-{args.split}.manifest.json")
    print(text)
    return EXIT_OK


def cmd_predict(args) -> int:
    tokens = tokenize(args.instruction or "")
    if not tokens:
        raise UsageError("instruction is empty")
    model, vocab, config = _checkpoint(args)
    graph = _load_graph(args.graph)
    names = nodes_by_name(graph)
    for flag, name in (("--source", args.source), ("--dest", args.dest)):
        if name not in names:
            raise DataError(f"{flag} node {name!r} is not in graph {args.graph}")
    unknown = vocab.unknown(tokens)
    if unknown:
        print(
            f"warning: out-of-vocabulary words mapped to <unk>: {' '.join(sorted(set(unknown)))}",
            file=sys.stderr,
        )
    source, dest = names[args.source], names[args.dest]
    # the sample needs a plan slot; prediction never reads it
    sample = NavSample(graph, source, dest, tokens, ())
    max_triplets = args.max_triplets or config.max_triplets
    pred = predict(model, [sample], vocab, max_triplets, MAX_DECODE_STEPS)[0]
    try:
        reached = execute_plan(graph, source, pred.triplets) == dest
        end = str(execute_plan(graph, source, pred.triplets))
    except PlanError as exc:
        reached, end = False, f"not executable ({exc})"
    print(" ".join(b.code for b in pred.behaviors) or "(empty plan)")
    for t in pred.triplets:
        print(f"  {t}")
    print(f"ends at: {end}")
    print(f"reaches {dest}: {'yes' if reached else 'no'}")
    if pred.truncated:
        print(f"warning: no STOP within {MAX_DECODE_STEPS} steps")
    doc = {
        "behaviors": [b.code for b in pred.behaviors],
        "triplets": [t.to_list() for t in pred.triplets],
        "positions": pred.positions,
        "reaches_dest": reached,
        "truncated": pred.truncated,
    }
    if args.trace:
        doc["attention_trace"] = [[round(float(x), 6) for x in a] for a in pred.attention_trace]
        for k, a in enumerate(pred.attention_trace):
            top = sorted(range(len(a)), key=lambda j: -a[j])[:3]
            print(f"step {k}: " + ", ".join(f"{j}:{a[j]:.3f}" for j in top))
    out = Path(args.out) if args.out else default_data_dir() / "runs"
    atomic_write_text(out / "predict.json", json.dumps(doc, indent=2) + "\n")
    manifest = RunManifest("predict", asdict(config), config.seed, started=time.time())
    manifest.inputs = [str(args.checkpoint), str(args.graph)]
    manifest.outputs = [str(out / "predict.json")]
    manifest.extra = {"source": args.source, "dest": args.dest, "instruction": args.instruction}
    write_manifest(manifest, out / "predict.manifest.json")
    return EXIT_OK


def cmd_inspect_graph(args) -> int:
    manifest = RunManifest("inspect-graph", {}, None, started=time.time())
    graph = _load_graph(args.graph)
    summary = {
        "env_id": graph.env_id,
        "nodes": len(graph.nodes),
        "triplets": len(graph),
        "connected": graph.is_connected(),
        "behaviors": {},
        "node_types": {},
    }
    for t in graph.triplets:
        summary["behaviors"][t.behavior.code] = summary["behaviors"].get(t.behavior.code, 0) + 1
    for n in graph.nodes:
        summary["node_types"][n.type.value] = summary["node_types"].get(n.type.value, 0) + 1
    summary["behaviors"] = dict(sorted(summary["behaviors"].items()))
    summary["node_types"] = dict(sorted(summary["node_types"].items()))
    print(json.dumps(summary, indent=2))
    out = Path(args.out) if args.out else default_data_dir() / "runs"
    manifest.inputs = [str(args.graph)]
    manifest.extra = summary
    write_manifest(manifest, out / "inspect-graph.manifest.json")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="graph2plan", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate synthetic train/test-repeated/test-new splits")
    g.add_argument("--envs", type=int, default=20)
    g.add_argument("--samples", type=int, default=100, help="samples per environment")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help=f"output directory (default ${DATA_ENV} or ./data)")
    g.add_argument("--double-fraction", type=float, default=0.25)
    g.add_argument("--graph-max-triplets", type=int, default=40)
    g.add_argument("--new-env-fraction", type=float, default=0.15)
    g.add_argument("--heldout-fraction", type=float, default=0.1)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="flat JSON file with TrainConfig keys")
    t.add_argument("--data", help="directory holding the split files")
    t.add_argument("--out", help="run directory (default <data>/run)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-triplets", type=int)
    t.add_argument("--word-vectors", help="whitespace-separated pretrained vectors")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--split", choices=SPLITS, default="test-repeated")
    e.add_argument("--per-sample", action="store_true")
    e.add_argument("--config", help="refuse to run unless the checkpoint was trained with this config")
    e.add_argument("--max-triplets", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="decode a plan for one instruction")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--graph", required=True, help="JSON document with env_id and triplets")
    r.add_argument("--source", required=True)
    r.add_argument("--dest", required=True)
    r.add_argument("--instruction", required=True)
    r.add_argument("--trace", action="store_true", help="print per-step attention")
    r.add_argument("--max-triplets", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_predict)

    i = sub.add_parser("inspect-graph", help="print node/triplet counts and connectivity")
    i.add_argument("--graph", required=True)
    i.add_argument("--out")
    i.set_defaults(func=cmd_inspect_graph)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"graph2plan {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"graph2plan {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, GraphError, InfeasibleError, CheckpointError, OSError, ValueError) as exc:
        print(f"graph2plan {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
