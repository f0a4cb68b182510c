"""
Command-line entry point.  Every stage reads and writes files, so any stage
can be rerun from the artifacts of the previous ones.

Every flag can also be set in a configuration file under its long name;
flags given on the command line win.
"""

import argparse
import logging
import os
import sys

from typing import Any, Callable, Dict, List, Mapping, Optional

import numpy as np

from chainrules import __version__
from chainrules import config
from chainrules import kg as kg_store
from chainrules import miner, model, reasoner, sampler, trainer, world
from chainrules.kg import Kg
from chainrules.model import checkpoint


_LOGGER = logging.getLogger(__name__)

Values = Dict[str, str]

_SETTINGS = (
    "seed",
    "threads",
    "window_size",
    "dim",
    "epochs",
    "batch",
    "lr",
    "max_len",
    "open_ratio",
    "top_k",
    "num_samples",
    "entities",
    "queries_per_hop",
    "aggregation",
    "tie_policy",
    "encoder",
    "selection",
    "checkpoint_every",
    "resample_every",
    "remove_fraction",
    "no_null",
    "check_gradients",
    "verbose",
)

# Inputs and outputs; left out of the provenance hash.
_LOCATIONS = (
    "kg",
    "rules",
    "checkpoint",
    "samples_file",
    "queries",
    "out",
)


class UsageError(Exception):
    pass


def _provenance(command: str, values: Mapping[str, str]) -> str:
    settings = {
        k: v for k, v in values.items() if k not in _LOCATIONS and k != "verbose"
    }
    return "chainrules %s %s config=%s" % (
        __version__,
        command,
        config.config_hash({"command": command, **settings}),
    )


def _require(values: Values, key: str) -> str:
    flag = "--" + key.replace("_", "-")
    path = values.get(key)
    if not path:
        raise UsageError(f"{flag} is required")
    if not os.path.exists(path):
        raise UsageError(f"{flag}: no such file or directory: {path}")
    return path


def _optional(values: Values, key: str) -> Optional[str]:
    return values.get(key) or None


def _out(values: Values) -> str:
    out = _optional(values, "out")
    if out is None:
        raise UsageError("--out is required")
    return out


def _checkpoints(values: Values) -> List[str]:
    """One path, or several on separate lines of a configuration file."""
    raw = values.get("checkpoint", "")
    paths = [p.strip() for p in raw.splitlines() if p.strip()]
    if not paths:
        raise UsageError("--checkpoint is required")
    for p in paths:
        if not os.path.exists(p):
            raise UsageError(f"--checkpoint: no such file or directory: {p}")
    return paths


def _load_graph(path: str) -> Kg:
    """A splits directory yields its training graph over the shared
    vocabulary; anything else is a snapshot or a TSV file."""
    if os.path.isdir(path):
        return kg_store.load_splits(path).train
    return kg_store.load(path)


def _train_config(values: Values) -> trainer.TrainConfig:
    d = trainer.TrainConfig()
    return trainer.TrainConfig(
        batch_size=config.get_int(values, "batch", d.batch_size),
        epochs=config.get_int(values, "epochs", d.epochs),
        learning_rate=config.get_float(values, "lr", d.learning_rate),
        seed=config.get_int(values, "seed", d.seed),
        d=config.get_int(values, "dim", d.d),
        window_size=config.get_int(values, "window_size", d.window_size),
        n_max=config.get_int(values, "max_len", d.n_max),
        open_ratio=config.get_float(values, "open_ratio", d.open_ratio),
        samples=config.get_int(values, "num_samples", d.samples),
        resample_every=config.get_optional_int(
            values, "resample_every", d.resample_every
        ),
        checkpoint_every=config.get_optional_int(
            values, "checkpoint_every", d.checkpoint_every
        ),
        encoder=config.get_str(values, "encoder", d.encoder),
        selection=config.get_str(values, "selection", d.selection),
        threads=config.get_int(values, "threads", d.threads),
    )


def cmd_ingest(values: Values) -> int:
    graph = _load_graph(_require(values, "kg"))
    out = _out(values)
    fraction = config.get_float(values, "remove_fraction", 0.0)
    if fraction:
        graph = kg_store.remove_fraction(
            graph, fraction, config.get_int(values, "seed", 0)
        )
    kg_store.save_snapshot(graph, out)
    _LOGGER.info("Saved %s to %s", graph, out)
    return 0


def cmd_sample(values: Values) -> int:
    graph = _load_graph(_require(values, "kg"))
    d = sampler.SamplerConfig()
    cfg = sampler.SamplerConfig(
        n_max=config.get_int(values, "max_len", d.n_max),
        open_ratio=config.get_float(values, "open_ratio", d.open_ratio),
        count=config.get_int(values, "num_samples", d.count),
        seed=config.get_int(values, "seed", d.seed),
        threads=config.get_int(values, "threads", d.threads),
    )
    samples = sampler.sample_paths(graph, cfg)
    sampler.write_samples(samples, graph, _out(values), _provenance("sample", values))
    return 0


def _check_gradients(
    graph: Kg,
    cfg: trainer.TrainConfig,
    samples: List[sampler.PathSample],
) -> bool:
    small = model.ModelConfig(
        d=8,
        window_size=cfg.window_size,
        encoder=cfg.encoder,
        selection="hard" if cfg.selection == "random" else cfg.selection,
        seed=cfg.seed,
    )
    params = model.init_params(
        small, graph.num_relations, np.random.default_rng(cfg.seed)
    )
    errors = trainer.gradient_check(params, small, samples[:16])
    worst = max(errors, key=lambda k: errors[k])
    _LOGGER.info("Gradient check: worst tensor %s, error %.3g", worst, errors[worst])
    return errors[worst] < 1e-4


def cmd_train(values: Values) -> int:
    target = _optional(values, "checkpoint")
    if target is None:
        raise UsageError("--checkpoint is required")
    graph = _load_graph(_require(values, "kg"))
    cfg = _train_config(values)
    samples: Optional[List[sampler.PathSample]] = None
    if _optional(values, "samples_file") is not None:
        samples = sampler.read_samples(_require(values, "samples_file"), graph)
    if config.get_bool(values, "check_gradients", False):
        batch = samples or sampler.sample_paths(graph, cfg.sampler_config(0))
        if not _check_gradients(graph, cfg, batch):
            print("chainrules: gradient check failed", file=sys.stderr)
            return 1
    result = trainer.fit(
        graph,
        cfg,
        samples=samples,
        checkpoint_path=target,
        provenance=_provenance("train", values),
    )
    trainer.write_log(result.log, sys.stdout)
    out = _optional(values, "out")
    if out is not None:
        with open(out, "w", encoding="utf-8", newline="") as f:
            trainer.write_log(result.log, f)
    return 0


def cmd_mine(values: Values) -> int:
    paths = _checkpoints(values)
    d = miner.MinerConfig()
    cfg = miner.MinerConfig(
        max_length=config.get_int(values, "max_len", d.max_length),
        top_k=config.get_int(values, "top_k", d.top_k),
        seed=config.get_int(values, "seed", d.seed),
        threads=config.get_int(values, "threads", d.threads),
    )
    kg_path = _require(values, "kg")
    out = _out(values)
    if len(paths) > 1:
        if not os.path.isdir(kg_path):
            raise UsageError("selecting among checkpoints needs a splits directory")
        splits = kg_store.load_splits(kg_path)
        best, report = reasoner.select_checkpoint(paths, splits, cfg)
        _LOGGER.info("Selected %s (validation %s)", best, report.summary())
        paths = [best]
    graph = _load_graph(kg_path)
    ckpt = checkpoint.load(paths[0], graph.relations)
    rules = miner.mine(ckpt.params, ckpt.config, graph, cfg)
    miner.write_rules(
        miner.flatten(rules),
        graph.relations,
        out,
        _provenance("mine", values),
    )
    return 0


def cmd_eval_kgc(values: Values) -> int:
    splits = kg_store.load_splits(_require(values, "kg"))
    rules = reasoner.read_rules(_require(values, "rules"), splits.everything.relations)
    d = reasoner.ChainConfig()
    cfg = reasoner.ChainConfig(
        aggregation=config.get_str(values, "aggregation", d.aggregation),
        tie_policy=config.get_str(values, "tie_policy", d.tie_policy),
        threads=config.get_int(values, "threads", d.threads),
    )
    report = reasoner.evaluate_kgc(
        splits.train,
        splits.everything,
        rules,
        splits.test.base_triples(),
        cfg,
    )
    out = _optional(values, "out")
    if out is not None:
        reasoner.write_report(
            report, splits.everything, out, _provenance("eval-kgc", values)
        )
    print(report.summary())
    return 0


def cmd_eval_inductive(values: Values) -> int:
    ckpt = checkpoint.load(_checkpoints(values)[0])
    queries = reasoner.read_queries(_require(values, "queries"), ckpt.relations)
    report = reasoner.evaluate_inductive(ckpt.params, ckpt.config, queries)
    print(report.summary())
    return 0


def cmd_gen_world(values: Values) -> int:
    d = world.WorldSpec()
    spec = world.WorldSpec(
        entities=config.get_int(values, "entities", d.entities),
        queries_per_hop=config.get_int(values, "queries_per_hop", d.queries_per_hop),
        seed=config.get_int(values, "seed", d.seed),
    )
    out = _out(values)
    generated = world.generate(spec)
    world.write_world(generated, out, _provenance("gen-world", values))
    return 0


def cmd_export_attn(values: Values) -> int:
    ckpt = checkpoint.load(_checkpoints(values)[0])
    out = _out(values)
    include_null = not config.get_bool(values, "no_null", False)
    matrix = model.export_attention(ckpt.params, ckpt.config, include_null)
    model.write_attention_csv(matrix, ckpt.relations.names, out, include_null)
    return 0


Command = Callable[[Values], int]


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--seed", type=int, help="seed for all randomness")
    common.add_argument("--threads", type=int, help="worker threads (default 1)")
    common.add_argument("--out", help="output path")
    common.add_argument(
        "--verbose", action="store_true", default=None, help="debug logging"
    )

    parser = argparse.ArgumentParser(
        prog="chainrules",
        description="Learn chain-like Horn rules from a knowledge graph.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def command(name: str, func: Command, summary: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=summary, description=summary)
        p.set_defaults(func=func)
        return p

    p = command("ingest", cmd_ingest, "load triples and write a graph snapshot")
    p.add_argument("--kg", help="TSV file, splits directory or snapshot")
    p.add_argument("--remove-fraction", type=float, help="drop this fraction of triples")

    p = command("sample", cmd_sample, "sample relation paths and dump them")
    p.add_argument("--kg", help="TSV file, splits directory or snapshot")
    p.add_argument("--max-len", type=int, help="longest sampled body")
    p.add_argument("--open-ratio", type=float, help="share of open paths")
    p.add_argument("--num-samples", type=int, help="paths to sample")

    p = command("train", cmd_train, "train the model; prints the epoch log")
    p.add_argument("--kg", help="TSV file, splits directory or snapshot")
    p.add_argument("--checkpoint", help="checkpoint to write")
    p.add_argument("--samples-file", help="train on a sample dump instead of sampling")
    p.add_argument("--window-size", type=int, help="relations per composition window")
    p.add_argument("--dim", type=int, help="embedding width")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--batch", type=int, help="batch size")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--max-len", type=int, help="longest sampled body")
    p.add_argument("--open-ratio", type=float, help="share of open paths")
    p.add_argument("--num-samples", type=int, help="paths per sampling round")
    p.add_argument("--encoder", choices=model.ENCODERS, help="window encoder")
    p.add_argument("--selection", choices=model.SELECTIONS, help="window selection")
    p.add_argument("--resample-every", type=int, help="epochs between fresh samples")
    p.add_argument("--checkpoint-every", type=int, help="epochs between numbered checkpoints")
    p.add_argument(
        "--check-gradients",
        action="store_true",
        default=None,
        help="verify gradients first",
    )

    p = command("mine", cmd_mine, "extract the top rules of every head")
    p.add_argument("--kg", help="graph the checkpoint was trained on")
    p.add_argument(
        "--checkpoint",
        nargs="+",
        help="trained checkpoint; several are ranked by validation MRR",
    )
    p.add_argument("--max-len", type=int, help="longest rule body")
    p.add_argument("--top-k", type=int, help="rules kept per head")

    p = command("eval-kgc", cmd_eval_kgc, "filtered ranking with mined rules")
    p.add_argument("--kg", help="directory with train.txt, valid.txt, test.txt")
    p.add_argument("--rules", help="rule file")
    p.add_argument("--aggregation", choices=reasoner.AGGREGATIONS, help="score combination")
    p.add_argument("--tie-policy", choices=reasoner.TIE_POLICIES, help="rank of tied scores")

    p = command("eval-inductive", cmd_eval_inductive, "classify long test paths")
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--queries", help="query file, one 'b1,...,bk<TAB>gold' per line")

    p = command("gen-world", cmd_gen_world, "generate a synthetic family world")
    p.add_argument("--entities", type=int, help="people in the training world")
    p.add_argument("--queries-per-hop", type=int, help="test queries per hop count")

    p = command("export-attn", cmd_export_attn, "dump two-relation attention")
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument(
        "--no-null", action="store_true", default=None, help="omit the null column"
    )
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    for key in _SETTINGS + _LOCATIONS:
        value = getattr(args, key, None)
        if isinstance(value, list):
            value = "\n".join(value)
        overrides[key] = value
    return overrides


def run(argv: List[str]) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.config is not None and not os.path.isfile(args.config):
            raise UsageError(f"--config: no such file: {args.config}")
        values = config.effective(args.config, _overrides(args))
        verbose = config.get_bool(values, "verbose", False)
        logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO)
        func: Command = args.func
        return func(values)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"chainrules {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as e:
        _LOGGER.debug("Command failed", exc_info=True)
        print(f"chainrules {args.command}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))
