"""Command-line pipeline: generate data, train, merge, evaluate, benchmark.

Exit codes: 0 on success, 1 on a usage error, 2 on a runtime error.
Logs go to stderr; each run prints a one-line summary to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .engine import ARCHS, load_model, save_model
from .errors import ConfigurationError, FormatError, GnnMergeError, NumericError
from .evaluation import EvalReport, bench_merge, evaluate_merged, export_embeddings
from .graph import disjoint_label_split, generate_sbm, link_split, load_graph, node_split, remove_edges, save_graph
from .merge import MERGE_METHODS, MergeConfig, alignment_report, write_alignment_csv
from .reduction import MergeDomain
from .trainer import LINK, NODE, TaskSpec, TrainConfig, grad_check, load_task, save_task, train

log = logging.getLogger("gnnmerge")

SPLIT_MODES = ("disjoint-labels", "node-split", "link-split")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _save_nodes(nodes: np.ndarray, path: Path) -> None:
    path.write_text(json.dumps({"nodes": nodes.tolist()}) + "\n")


def load_nodes(path) -> np.ndarray:
    """Node ids from a domain file written by ``gen-data``."""
    try:
        doc = json.loads(Path(path).read_text())
        return np.asarray(doc["nodes"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad domain file {path}: {exc}") from None


def _load_task_graph(task_path, graph_path=None):
    task, ref = load_task(task_path)
    path = graph_path or ref
    if path is None:
        raise ConfigurationError(f"task {task_path} names no graph; pass --graph")
    return task, load_graph(path)


def _merging_inputs(graph_paths, domain_paths):
    graphs = [load_graph(p) for p in graph_paths]
    if not domain_paths:
        return graphs
    if len(domain_paths) != len(graphs):
        raise ConfigurationError(f"{len(graphs)} graphs need as many --domain files, got {len(domain_paths)}")
    return [MergeDomain(g, load_nodes(d)) for g, d in zip(graphs, domain_paths)]


# -- subcommands -------------------------------------------------------------------


def cmd_gen_data(args) -> str:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    graph = generate_sbm(
        args.blocks, args.nodes_per_block, args.p_in, args.p_out, args.feature_dim, args.noise, args.seed, args.mean_scale
    )
    seq = np.random.SeedSequence(args.seed).spawn(2)
    split_seed = int(seq[1].generate_state(1)[0])
    written = []
    if args.split == "disjoint-labels":
        save_graph(graph, out / "graph.gnmg")
        save_task(TaskSpec("union", NODE, node_split(graph, split_seed), args.blocks), out / "task_union.json", "graph.gnmg")
        (ga, sa), (gb, sb) = disjoint_label_split(graph, split_seed)
        for name, g, split in (("a", ga, sa), ("b", gb, sb)):
            save_graph(g, out / f"graph_{name}.gnmg")
            classes = int(g.labels.max()) + 1
            save_task(TaskSpec(name, NODE, split, classes), out / f"task_{name}.json", f"graph_{name}.gnmg")
            _save_nodes(np.flatnonzero(g.labels >= 0), out / f"domain_{name}.json")
            written += [f"graph_{name}.gnmg", f"task_{name}.json", f"domain_{name}.json"]
        written += ["graph.gnmg", "task_union.json"]
    elif args.split == "node-split":
        save_graph(graph, out / "graph.gnmg")
        save_task(TaskSpec("nc", NODE, node_split(graph, split_seed), args.blocks), out / "task.json", "graph.gnmg")
        written += ["graph.gnmg", "task.json"]
    else:
        split = link_split(graph.without_labels(), split_seed)
        message = remove_edges(graph.without_labels(), np.concatenate([split.val_pos, split.test_pos]))
        save_graph(message, out / "graph.gnmg")
        save_task(TaskSpec("lp", LINK, split), out / "task.json", "graph.gnmg")
        written += ["graph.gnmg", "task.json"]
    return (
        f"gen-data: {graph.num_nodes} nodes, {graph.num_edges} directed edges, split={args.split}, "
        f"seed={args.seed} -> {out} ({', '.join(sorted(written))})"
    )


def cmd_train(args) -> str:
    task, graph = _load_task_graph(args.task, args.graph)
    config = TrainConfig(
        task,
        arch=args.arch,
        num_layers=args.layers,
        hidden_dim=args.hidden,
        learning_rate=args.lr,
        epochs=args.epochs,
        seed=args.seed,
        gin_depth=args.gin_depth,
        log_every=args.log_every,
    )
    model = train(graph, config)
    save_model(model, args.out)
    return (
        f"train: task={task.task_id} arch={args.arch} layers={args.layers} hidden={args.hidden} epochs={args.epochs} "
        f"seed={args.seed} final_loss={float(model.metadata['final_loss']):.6g} -> {args.out}"
    )


def cmd_merge(args) -> str:
    models = [load_model(p) for p in args.model]
    graphs = _merging_inputs(args.graph, args.domain)
    config = MergeConfig(
        ridge=args.ridge,
        iterative_lr=args.iterative_lr,
        iterative_steps=args.steps,
        joint_lr=args.joint_lr,
        sample_ratio=args.sample_ratio,
        seed=args.seed,
    )
    merged = MERGE_METHODS[args.method](models, graphs, config)
    save_model(merged, args.out)
    if args.alignment_csv:
        plain = [g.graph if isinstance(g, MergeDomain) else g for g in graphs]
        if len(plain) == 1:
            plain = plain * len(models)
        per_model = [alignment_report(merged, m, g) for m, g in zip(models, plain)]
        write_alignment_csv(list(np.mean(per_model, axis=0)), args.alignment_csv)
    return (
        f"merge: method={args.method} models={len(models)} graphs={len(args.graph)} "
        f"sample_ratio={args.sample_ratio} seed={args.seed} -> {args.out}"
    )


def cmd_eval(args) -> str:
    if args.graph and len(args.graph) != len(args.task):
        raise ConfigurationError(f"{len(args.task)} tasks need as many --graph overrides, got {len(args.graph)}")
    overrides = args.graph or [None] * len(args.task)
    model = load_model(args.model)
    tasks = [_load_task_graph(t, g) for t, g in zip(args.task, overrides)]
    report = evaluate_merged(model, tasks, args.split)
    print(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    dest = args.csv or "stdout"
    return f"eval: model={args.model} tasks={len(tasks)} split={args.split} -> {dest}"


def cmd_bench(args) -> str:
    models = [load_model(p) for p in args.model]
    graphs = _merging_inputs(args.graph, args.domain)
    task, scratch_graph = _load_task_graph(args.scratch_task, args.scratch_graph)
    ref = models[0]
    config = TrainConfig(
        task,
        arch=ref.arch,
        num_layers=len(ref.layers),
        hidden_dim=ref.embedding_dim,
        learning_rate=args.lr,
        epochs=args.epochs,
        seed=args.seed,
    )
    report: EvalReport = bench_merge(models, graphs, scratch_graph, config, MergeConfig(seed=args.seed))
    print(report.to_text())
    if args.csv:
        lines = ["timing,value"] + [f"{k},{report.timings[k]:.9g}" for k in sorted(report.timings)]
        Path(args.csv).write_text("\n".join(lines) + "\n")
    return (
        f"bench: models={len(models)} epochs={args.epochs} seed={args.seed} "
        f"speedup_analytical={report.timings['speedup_analytical']:.1f}x -> {args.csv or 'stdout'}"
    )


def cmd_export_emb(args) -> str:
    model = load_model(args.model)
    graph = load_graph(args.graph)
    export_embeddings(model, graph, args.out)
    return f"export-emb: model={args.model} graph={args.graph} nodes={graph.num_nodes} -> {args.out}"


def cmd_grad_check(args) -> str:
    task, graph = _load_task_graph(args.task, args.graph)
    config = TrainConfig(
        task,
        arch=args.arch,
        num_layers=args.layers,
        hidden_dim=args.hidden,
        epochs=0,
        seed=args.seed,
        gin_depth=args.gin_depth,
    )
    model = load_model(args.model) if args.model else train(graph, config)
    err = grad_check(model, graph, task, num_coords=args.coords, seed=args.seed)
    print(f"max_relative_error {err:.3e}")
    if err > args.tol:
        raise NumericError(f"gradient check failed: max relative error {err:.3e} > {args.tol:.1e}")
    return f"grad-check: task={task.task_id} arch={model.arch} coords={args.coords} seed={args.seed} -> stdout"


# -- parser ------------------------------------------------------------------------


def _add_arch_flags(p) -> None:
    p.add_argument("--arch", choices=ARCHS, default="GCN")
    p.add_argument("--layers", type=int, default=2, help="number of message-passing layers")
    p.add_argument("--hidden", type=int, default=128, help="hidden and embedding width")
    p.add_argument("--gin-depth", type=int, default=2, help="MLP depth inside each GIN layer")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gnnmerge", description="Merge GNNs by aligning node embeddings.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an SBM graph with task files")
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--nodes-per-block", type=int, default=100)
    p.add_argument("--p-in", type=float, default=0.1)
    p.add_argument("--p-out", type=float, default=0.01)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.7, help="feature noise standard deviation")
    p.add_argument("--mean-scale", type=float, default=1.0, help="norm of each block's feature mean")
    p.add_argument("--split", choices=SPLIT_MODES, default="disjoint-labels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one base model on a task")
    p.add_argument("--task", required=True, help="task JSON file")
    p.add_argument("--graph", help="graph file (default: the one the task names)")
    _add_arch_flags(p)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=10, help="log the loss every N epochs (0: never)")
    p.add_argument("--out", required=True, help="output model file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="merge trained models")
    p.add_argument("--model", action="append", required=True, help="base model file (repeat)")
    p.add_argument("--graph", action="append", required=True, help="merging graph, paired with --model (repeat)")
    p.add_argument("--domain", action="append", help="node-set file restricting each graph's alignment rows")
    p.add_argument("--method", choices=sorted(MERGE_METHODS), default="analytical")
    p.add_argument("--ridge", type=float, default=None, help="Tikhonov ridge (default: relative to each Gram diagonal)")
    p.add_argument("--sample-ratio", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=500, help="iterative and joint optimization steps")
    p.add_argument("--iterative-lr", type=float, default=0.01)
    p.add_argument("--joint-lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alignment-csv", help="write per-layer mean embedding distance here")
    p.add_argument("--out", required=True, help="output model file")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="evaluate a model on one or more tasks")
    p.add_argument("--model", required=True)
    p.add_argument("--task", action="append", required=True, help="task JSON file (repeat)")
    p.add_argument("--graph", action="append", help="graph override, paired with --task")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--csv", help="also write the report as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time merging against training from scratch")
    p.add_argument("--model", action="append", required=True)
    p.add_argument("--graph", action="append", required=True)
    p.add_argument("--domain", action="append")
    p.add_argument("--scratch-task", required=True, help="union task trained from scratch")
    p.add_argument("--scratch-graph")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-emb", help="write final-layer embeddings as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_emb)

    p = sub.add_parser("grad-check", help="compare analytic and finite-difference gradients")
    p.add_argument("--task", required=True)
    p.add_argument("--graph")
    p.add_argument("--model", help="check this model instead of a fresh initialization")
    _add_arch_flags(p)
    p.add_argument("--coords", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        summary = args.func(args)
    except (GnnMergeError, OSError) as exc:
        print(f"gnnmerge {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
