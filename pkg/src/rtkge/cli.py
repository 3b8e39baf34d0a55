"""Command-line entry point: ingest -> sample -> split -> train -> eval -> export.

Every subcommand accepts ``--config FILE.json`` whose keys are argument names
(``d_s``, ``lr``, ...); explicit flags override the file.  Runs that write a
directory also write ``resolved_config.json`` there.  Tabular outputs are TSV
with one ``#`` provenance line carrying the seed and a digest of the resolved
arguments, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import grid as grid_mod
from .evaluation import EvalOptions, Evaluator, build_queries, format_aggregate_tsv, format_query_tsv
from .ingest import RuleTableError, build_rule_table, extract_all, parse_event_file
from .kg import (GraphConstructionError, TemporalKG, build_graph, read_tuples, read_types,
                 split_random, split_temporal, stats, write_tuples, write_types)
from .model import ModelConfig, TemporalKGE, load_checkpoint, save_checkpoint
from .sampling import SamplerConfig, SamplingError, snowball_sample, temporal_sample
from .training import TrainConfig, substream, train_loop

log = logging.getLogger("rtkge")

SPLIT_FILES = {"train": "train.tsv", "valid": "valid.tsv", "test": "test.tsv"}
TYPES_FILE = "types.tsv"
EVAL_MODES = ("interpolated", "extrapolated", "standard-extrapolated", "time-prediction")
# modes whose final model is retrained on train + valid
RETRAIN_MODES = ("extrapolated", "time-prediction")
# arguments that only name where things go; left out of the provenance digest
_LOCATION_KEYS = {"out", "out_dir", "config", "verbose", "workers"}


class CommandError(RuntimeError):
    pass


# -- provenance and config -----------------------------------------------------------

def resolved(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def provenance(args: argparse.Namespace) -> str:
    keep = {k: v for k, v in resolved(args).items() if k not in _LOCATION_KEYS}
    digest = hashlib.sha256(json.dumps(keep, sort_keys=True, default=str).encode()).hexdigest()[:16]
    return f"rtkge {args.command} seed={args.seed} args={digest}"


def write_resolved(args: argparse.Namespace, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(resolved(args), fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def write_tsv(path: Path, header: str, columns: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {header}\n")
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(str(x) for x in row) + "\n")


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# -- datasets -----------------------------------------------------------------------------

def load_kg(tuples: str, types: str) -> TemporalKG:
    for path in (tuples, types):
        if not Path(path).is_file():
            raise CommandError(f"no such file: {path}")
    return build_graph(read_tuples(tuples), read_types(types))


def write_kg(out_dir: Path, kg: TemporalKG, quads: np.ndarray, header: str, name: str = "tuples.tsv") -> None:
    write_tuples(out_dir / name, kg.to_labels(quads), header)
    used = np.unique(quads[:, [0, 2]]) if len(quads) else np.array([], dtype=np.int64)
    write_types(out_dir / TYPES_FILE, {kg.entities.label(i): kg.entity_types[i] for i in used}, header)


class Dataset:
    """A split directory mapped onto one shared vocabulary.

    Ids come from the concatenation train + valid + test, so any two loads of
    the same directory agree.  Duplicates across split files are kept.
    """

    def __init__(self, data_dir: str | Path):
        data_dir = Path(data_dir)
        paths = {k: data_dir / v for k, v in SPLIT_FILES.items()}
        for p in [*paths.values(), data_dir / TYPES_FILE]:
            if not p.is_file():
                raise CommandError(f"missing dataset file {p}")
        rows = {k: read_tuples(p) for k, p in paths.items()}
        types = read_types(data_dir / TYPES_FILE)
        self.kg = build_graph([r for k in SPLIT_FILES for r in rows[k]], types)
        ent, rel = self.kg.entities, self.kg.relations
        self.parts = {
            k: np.array([(ent.id(s), rel.id(r), ent.id(o), t) for s, r, o, t in v], dtype=np.int64).reshape(-1, 4)
            for k, v in rows.items()
        }

    def history(self, mode: str) -> np.ndarray:
        if mode in RETRAIN_MODES:
            return np.concatenate([self.parts["train"], self.parts["valid"]])
        return self.parts["train"]

    def relation_ids(self, labels: Sequence[str] | None) -> list[int] | None:
        if not labels:
            return None
        missing = [x for x in labels if x not in self.kg.relations]
        if missing:
            raise CommandError(f"unknown query relations {missing}")
        return [self.kg.relations.id(x) for x in labels]


def eval_options(args: argparse.Namespace, ds: Dataset) -> EvalOptions:
    kind = "time" if args.mode == "time-prediction" else "link"
    return EvalOptions(kind=kind, slot=None if kind == "time" else args.slot,
                       relations=ds.relation_ids(args.query_relations),
                       rerank=args.rerank, tie=args.tie, seed=args.seed)


# -- subcommands -----------------------------------------------------------------------------

def cmd_ingest(args) -> None:
    if not Path(args.rules).is_file():
        raise CommandError(f"rules file not found: {args.rules}")
    rules = build_rule_table(args.rules)
    if args.subset == "default":
        rules = rules.default_subset()
    events, skipped = [], 0
    for path in args.events:
        if not Path(path).is_file():
            raise CommandError(f"events file not found: {path}")
        report = parse_event_file(path)
        events.extend(report.events)
        skipped += report.skipped
    result = extract_all(events, rules)
    out = Path(args.out_dir)
    write_resolved(args, out)
    header = provenance(args)
    write_tuples(out / "tuples.tsv", ((x.head, x.relation, x.tail, x.day) for x in result.tuples), header)
    write_types(out / TYPES_FILE, dict(sorted(result.entity_types().items())), header)
    rows = [(code, result.per_relation[code]) for code in sorted(result.per_relation)]
    rows += [("total_events", len(events)), ("skipped_lines", skipped), ("unmatched_events", result.unmatched)]
    write_tsv(out / "report.tsv", header, ["relation", "count"], rows)
    log.info("extracted %d tuples from %d events (%d skipped)", len(result.tuples), len(events), skipped)


def cmd_stats(args) -> None:
    kg = load_kg(args.tuples, args.types)
    row = stats(kg).as_row()
    text = f"# {provenance(args)}\n" + "\t".join(row) + "\n" + "\t".join(str(v) for v in row.values()) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_split(args) -> None:
    kg = load_kg(args.tuples, args.types)
    if args.mode == "random":
        split = split_random(kg, args.ratios, seed=int(substream(args.seed, "split").integers(2 ** 31)))
    else:
        split = split_temporal(kg, args.ratios)
    out = Path(args.out_dir)
    write_resolved(args, out)
    header = provenance(args)
    for name, quads in zip(SPLIT_FILES.values(), (split.train, split.validation, split.test)):
        write_tuples(out / name, kg.to_labels(quads), header)
    write_kg(out, kg, kg.quads, header, name="all.tsv")
    log.info("split sizes %s", split.sizes)


def cmd_sample_snowball(args) -> None:
    kg = load_kg(args.tuples, args.types)
    seed = int(substream(args.seed, "sampling").integers(2 ** 31))
    result = snowball_sample(kg, SamplerConfig(N=args.N, S=args.S, K=args.K, seed=seed))
    out = Path(args.out_dir)
    write_resolved(args, out)
    header = provenance(args)
    write_kg(out, kg, result.quads, header)
    write_tsv(out / "provenance.tsv", header, ["order", "entity", "degree"],
              ((i, kg.entities.label(v), d) for i, (v, d) in enumerate(result.table)))


def cmd_sample_temporal(args) -> None:
    kg = load_kg(args.tuples, args.types)
    SamplerConfig(N=args.N, W1=args.W1, W2=args.W2)  # validates the weights
    result = temporal_sample(kg, args.W1, args.W2, args.N)
    out = Path(args.out_dir)
    write_resolved(args, out)
    header = provenance(args)
    write_kg(out, kg, result.quads, header)
    write_tsv(out / "popularity.tsv", header, ["repository", "popularity", "related_nodes", "chosen"],
              ((lab, f"{score:g}", size, int(chosen)) for lab, score, size, chosen in result.table))


def _train_config(args) -> TrainConfig:
    return TrainConfig(eta=args.eta, margin=args.margin, lr=args.lr, l3=args.l3, dropout=args.dropout,
                       neg_time_agnostic=args.neg_agnostic, neg_time_dependent=args.neg_dependent,
                       batch_size=args.batch_size, warmup_steps=args.warmup_steps,
                       warmup_decay=args.warmup_decay, total_steps=args.steps,
                       validation_every=args.validation_every, seed=args.seed,
                       select_best=args.mode not in RETRAIN_MODES)


def cmd_train(args) -> None:
    ds = Dataset(args.data_dir)
    config = _train_config(args)
    history = ds.history(args.mode)
    mc = ModelConfig(ds.kg.n_entities, ds.kg.n_relations, kind=args.model, d_s=args.d_s, d_t=args.d_t,
                     d_r=args.d_r, norm=args.norm, bilinear=args.bilinear)
    model = TemporalKGE(mc, seed=int(substream(args.seed, "init").integers(2 ** 31)))

    validate = None
    if config.select_best and config.total_steps:
        if not len(ds.parts["valid"]):
            raise CommandError("validation split is empty but model selection is enabled")
        options = eval_options(args, ds)

        def validate(m):
            return Evaluator(m, ds.kg.entity_types, history, options).evaluate(ds.parts["valid"]).mrr

    result = train_loop(model, history, ds.kg.entity_types, config, validate=validate)
    out = Path(args.out_dir)
    write_resolved(args, out)
    header = provenance(args)
    rows = [(step, _fmt(loss), "" if mrr is None else _fmt(mrr))
            for step, loss, mrr in result.log if mrr is not None or step % args.log_every == 0]
    write_tsv(out / "metrics.tsv", header, ["step", "loss", "valid_MRR"], rows)
    meta = {
        "entities": ds.kg.entities.labels,
        "entity_types": [t.value for t in ds.kg.entity_types],
        "relations": ds.kg.relations.labels,
        "mode": args.mode,
        "best_step": result.best_step,
        "train": resolved(args),
    }
    save_checkpoint(out / "checkpoint.npz", result.model, meta, result.rng_state)


def _checkpoint(path: str) -> tuple[TemporalKGE, dict]:
    if not Path(path).is_file():
        raise CommandError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args) -> None:
    model, record = _checkpoint(args.checkpoint)
    ds = Dataset(args.data_dir)
    if record["meta"].get("entities") not in (None, ds.kg.entities.labels):
        raise CommandError("checkpoint vocabulary does not match the dataset")
    trained = record["meta"].get("mode")
    if trained and (trained in RETRAIN_MODES) != (args.mode in RETRAIN_MODES):
        log.warning("checkpoint trained in %s mode, evaluating as %s", trained, args.mode)
    options = eval_options(args, ds)
    split = ds.parts[args.split]
    queries = build_queries(split, options.kind, options.relations, options.slot)
    evaluator = Evaluator(model, ds.kg.entity_types, ds.history(args.mode), options)
    result = evaluator.evaluate(split, queries)
    out = Path(args.out_dir)
    write_resolved(args, out)
    header = provenance(args)
    (out / "ranks.tsv").write_text(format_query_tsv(result, queries, header), encoding="utf-8")
    (out / "metrics.tsv").write_text(format_aggregate_tsv(result, header, name=model.config.kind),
                                     encoding="utf-8")
    log.info("%s MRR %.4f over %d queries", args.mode, result.mrr, result.n)


def cmd_export_importance(args) -> None:
    model, record = _checkpoint(args.checkpoint)
    if not model.config.has_relative:
        raise CommandError("checkpoint has no relation-importance matrix (not an RT model with d_r > 0)")
    labels = record["meta"].get("relations") or [f"r{i}" for i in range(model.config.n_relations)]
    matrix = model.W_P.detach().abs().double().numpy()
    rows = ([lab, *(_fmt(v) for v in row)] for lab, row in zip(labels, matrix))
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_tsv(path, provenance(args), ["relation", *labels], rows)


def cmd_grid(args) -> None:
    runs = grid_mod.tuning_grid() if args.which == "tuning" else grid_mod.dimension_grid()
    out = Path(args.out_dir)
    write_resolved(args, out)
    columns = list(runs[0])
    write_tsv(out / "grid.tsv", provenance(args), ["run", *columns],
              ([i, *(r[c] for c in columns)] for i, r in enumerate(runs)))
    if not args.run:
        return
    if not args.data_dir:
        raise CommandError("--run needs --data-dir")
    base = ["--seed", str(args.seed), "--workers", str(args.workers)]
    if args.train_config:
        base += ["--config", args.train_config]
    for i, run in enumerate(runs):
        run_dir = out / f"run{i:03d}"
        flags = []
        for key, value in run.items():
            flags += [f"--{key.replace('_', '-')}", str(value)]
        if args.which == "tuning":
            flags += ["--model", args.model]
        code = main(["train", "--data-dir", args.data_dir, "--out-dir", str(run_dir),
                     "--mode", args.mode, *flags, *base])
        if code:
            raise CommandError(f"grid run {i} failed during training")
        code = main(["eval", "--checkpoint", str(run_dir / "checkpoint.npz"), "--data-dir", args.data_dir,
                     "--out-dir", str(run_dir), "--mode", args.mode, "--split", args.split,
                     "--seed", str(args.seed)])
        if code:
            raise CommandError(f"grid run {i} failed during evaluation")


# -- parser --------------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of argument defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1, help="cap on torch intra-op threads")
    p.add_argument("-v", "--verbose", action="store_true")


def _graph_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tuples", required=True)
    p.add_argument("--types", required=True)


def _query_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=EVAL_MODES, default="interpolated")
    p.add_argument("--query-relations", nargs="*", default=None, help="relation labels to query (default all)")
    p.add_argument("--slot", choices=("s", "o"), default="o", help="hidden entity of link queries")
    p.add_argument("--rerank", choices=("push", "filter", "none"), default="push")
    p.add_argument("--tie", choices=("pessimistic", "optimistic", "random"), default="pessimistic")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtkge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="event JSON lines -> typed tuples")
    p.add_argument("--events", nargs="+", required=True)
    p.add_argument("--rules", default=str(Path(__file__).parent / "data" / "rules.tsv"))
    p.add_argument("--subset", choices=("all", "default"), default="all")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", help="graph summary statistics")
    _graph_inputs(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", help="train/valid/test split")
    _graph_inputs(p)
    p.add_argument("--mode", choices=("random", "temporal"), default="random")
    p.add_argument("--ratios", type=float, nargs=3, default=[0.9, 0.05, 0.05])
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("sample-snowball", help="max-degree snowball sample")
    _graph_inputs(p)
    p.add_argument("-N", type=int, required=True)
    p.add_argument("-S", type=int, default=1)
    p.add_argument("-K", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sample_snowball)

    p = sub.add_parser("sample-temporal", help="repository-popularity sample")
    _graph_inputs(p)
    p.add_argument("-N", type=int, required=True)
    p.add_argument("--W1", type=float, default=1.0)
    p.add_argument("--W2", type=float, default=1.0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sample_temporal)

    d = TrainConfig()
    p = sub.add_parser("train", help="train a model on a split directory")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--model", choices=("rotate", "de", "rt"), default="rt")
    p.add_argument("--d-s", type=int, default=64)
    p.add_argument("--d-t", type=int, default=64)
    p.add_argument("--d-r", type=int, default=32)
    p.add_argument("--norm", choices=("l1", "l2"), default="l1")
    p.add_argument("--bilinear", action="store_true")
    p.add_argument("--eta", type=float, default=d.eta)
    p.add_argument("--margin", type=float, default=d.margin)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--l3", type=float, default=d.l3)
    p.add_argument("--dropout", type=float, default=d.dropout)
    p.add_argument("--neg-agnostic", type=int, default=d.neg_time_agnostic)
    p.add_argument("--neg-dependent", type=int, default=d.neg_time_dependent)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--warmup-steps", type=int, default=d.warmup_steps)
    p.add_argument("--warmup-decay", type=float, default=d.warmup_decay)
    p.add_argument("--steps", type=int, default=d.total_steps)
    p.add_argument("--validation-every", type=int, default=d.validation_every)
    p.add_argument("--log-every", type=int, default=100)
    _query_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank held-out queries against a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--out-dir", required=True)
    _query_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-importance", help="|W_P| relation-importance matrix as TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_importance)

    p = sub.add_parser("grid", help="hyperparameter or dimension sweep")
    p.add_argument("--which", choices=("tuning", "dims"), default="tuning")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--run", action="store_true", help="train and evaluate every grid point")
    p.add_argument("--data-dir")
    p.add_argument("--model", choices=("rotate", "de", "rt"), default="rt", help="model for the tuning grid")
    p.add_argument("--mode", choices=EVAL_MODES, default="interpolated")
    p.add_argument("--split", choices=("valid", "test"), default="valid")
    p.add_argument("--train-config", help="JSON defaults passed to every train run")
    p.set_defaults(func=cmd_grid)

    for action in sub.choices.values():
        _common(action)
    parser.subcommands = sub.choices
    return parser


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config = pre.parse_known_args(argv)[0].config
    if config and argv and argv[0] in parser.subcommands:
        sub = parser.subcommands[argv[0]]
        try:
            with open(config, encoding="utf-8") as fh:
                defaults = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {config}: {exc}")
        actions = {a.dest: a for a in sub._actions}
        unknown = sorted(set(defaults) - set(actions))
        if unknown:
            parser.error(f"unknown config keys {unknown}")
        sub.set_defaults(**defaults)
        for key in defaults:
            # a required flag may be supplied by the file instead
            actions[key].required = False
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.workers))
    try:
        args.func(args)
    except (CommandError, RuleTableError, SamplingError, GraphConstructionError,
            FloatingPointError, ValueError, OSError) as exc:
        print(f"rtkge {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
