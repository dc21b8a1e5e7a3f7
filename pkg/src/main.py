import argparse
import os
import sys
from typing import Optional, Sequence

from config import ConfigManager
from graph import (DatasetFormatError, gen_chains, load_edge_list, load_graph_dataset,
                   load_node_dataset, renormalize_any, save_node_dataset)
from linalg import DimensionError, NonConvergenceError, inf_norm
from logger import IgnnLogger
from model import CheckpointError, load_checkpoint, rescale_model, save_checkpoint
from performance_monitor import PerformanceMonitor
from trainer import (ConstraintViolationError, IgnnTrainer, TrainConfig, evaluate,
                     load_dataset)
from wellposed import RescaleError, check, check_hetero

HANDLED_ERRORS = (NonConvergenceError, DimensionError, DatasetFormatError, CheckpointError,
                  RescaleError, ConstraintViolationError, ValueError, OSError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ignn", description="Implicit graph neural networks")
    commands = parser.add_subparsers(dest="command", required=True)

    chains = commands.add_parser("gen-chains", help="write the synthetic chains dataset")
    chains.add_argument("--length", type=int, required=True, help="edges per chain")
    chains.add_argument("--per-class", type=int, default=20, help="chains per class")
    chains.add_argument("--features", type=int, default=100, help="feature dimension")
    chains.add_argument("--train", type=int, default=20)
    chains.add_argument("--val", type=int, default=100)
    chains.add_argument("--test", type=int, default=200)
    chains.add_argument("--seed", type=int, default=0)
    chains.add_argument("--out", required=True, help="output directory")

    train = commands.add_parser("train", help="train a model from a config file")
    train.add_argument("--config", default="config.json")
    train.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a dotted config key (repeatable)")

    ev = commands.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True, help="dataset directory")
    ev.add_argument("--task", default="node-multiclass",
                    choices=["node-multiclass", "node-multilabel", "graph"])
    ev.add_argument("--split", default="test", choices=["train", "val", "test"])
    _add_graph_flags(ev)

    chk = commands.add_parser("check", help="report the well-posedness of a checkpoint on a graph")
    chk.add_argument("--weights", required=True, help="checkpoint file")
    chk.add_argument("--graph", required=True, help="edge list file")
    chk.add_argument("--nodes", type=int, default=None, help="node count (default: max id + 1)")
    chk.add_argument("--kappa", type=float, default=0.95, help="bound for several relations")
    _add_graph_flags(chk)

    res = commands.add_parser("rescale", help="write the rescaled equivalent of a checkpoint")
    res.add_argument("--checkpoint", required=True)
    res.add_argument("--out", required=True)
    return parser


def _add_graph_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--no-renormalize", action="store_true",
                        help="use the adjacency as stored")
    parser.add_argument("--relations", action="store_true",
                        help="edge lists carry a relation column")
    parser.add_argument("--symmetrize", action="store_true", help="add reverse edges")


def _console_logger() -> IgnnLogger:
    return IgnnLogger(log_dir=None, log_level=os.getenv("IGNN_LOG_LEVEL", "WARNING"))


def cmd_gen_chains(args: argparse.Namespace) -> int:
    dataset = gen_chains(args.length, args.per_class, args.features, args.train, args.val,
                         args.test, seed=args.seed, renormalize_graph=False)
    for path in save_node_dataset(dataset, args.out):
        print(path)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = ConfigManager(args.config)
    for item in args.set:
        key, sep, value = item.partition('=')
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        config.set(key.strip(), value)
    train_config = TrainConfig.from_manager(config)
    output = config.get_output_config()
    logger = IgnnLogger(output.get('log_dir'), output.get('log_level', 'INFO'))
    try:
        dataset = load_dataset(train_config)
        logger.info(f"Loaded {train_config.task} dataset from {train_config.dataset_path}")
        trainer = IgnnTrainer(train_config, logger, PerformanceMonitor(config, logger))
        trainer.train(dataset)
    except HANDLED_ERRORS as e:
        logger.log_error(e, "train")
        raise
    finally:
        logger.cleanup()
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    renormalize = not args.no_renormalize
    if args.task == "graph":
        dataset = load_graph_dataset(args.dataset, relations=args.relations,
                                     symmetrize=args.symmetrize or not args.relations,
                                     renormalize_graph=renormalize)
    else:
        dataset = load_node_dataset(args.dataset, task=args.task, relations=args.relations,
                                    symmetrize=args.symmetrize, renormalize_graph=renormalize)
    metrics = evaluate(args.checkpoint, dataset, task=args.task, split=args.split)
    for name, value in metrics.items():
        print(f"{name}\t{value:.6f}")
    return 0


def _infer_nodes(path: str) -> int:
    largest = -1
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split('\t')
            if len(parts) < 2 or not line.strip():
                continue
            try:
                largest = max(largest, int(parts[0]), int(parts[1]))
            except ValueError:
                raise DatasetFormatError(f"node ids must be integers: {line.strip()!r}", path,
                                         lineno)
    return largest + 1


def cmd_check(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.weights)
    n = args.nodes if args.nodes is not None else _infer_nodes(args.graph)
    graph = load_edge_list(args.graph, n, relation_col=args.relations, symmetrize=args.symmetrize)
    if not args.no_renormalize:
        graph = renormalize_any(graph)
    adjacencies = graph.adjacencies
    logger = _console_logger()
    for index, layer in enumerate(model.layers, start=1):
        if layer.relations == 1 and len(adjacencies) == 1:
            report = check(layer.W, adjacencies[0])
        else:
            report = check_hetero(layer.Ws, adjacencies, kappa=args.kappa)
        logger.log_wellposed(report, layer=index)
        print(f"layer {index}")
        print(report.summary())
    logger.cleanup()
    return 0


def cmd_rescale(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    rescaled, _ = rescale_model(model)
    save_checkpoint(rescaled, args.out)
    for index, (before, after) in enumerate(zip(model.layers, rescaled.layers), start=1):
        print(f"layer {index}\tinf_norm(W) {inf_norm(before.W):.6g} -> {inf_norm(after.W):.6g}")
    return 0


COMMANDS = {
    "gen-chains": cmd_gen_chains,
    "train": cmd_train,
    "eval": cmd_eval,
    "check": cmd_check,
    "rescale": cmd_rescale,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Command line entry point; returns the process exit code."""
    args = build_parser().parse_args(list(argv) if argv is not None else None)
    try:
        return COMMANDS[args.command](args)
    except HANDLED_ERRORS as e:
        print(f"error: {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
