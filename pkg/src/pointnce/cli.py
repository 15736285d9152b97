"""Command-line surface for the whole pipeline.

Machine-readable results (key=value lines, CSV) go to stdout; prose and
errors go to stderr. Exit codes: 0 success, 1 usage error, 2 runtime
error. Subcommands taking ``--seed`` are bit-reproducible in their file
outputs.
"""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from . import data, evaluation, gradcheck, training
from .encoder import embed_many
from .evaluation import EmbeddingTable


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="pointnce", description=__doc__)
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", default=",".join(data.SHAPE_CLASSES))
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--jitter", type=float, default=0.3)
    p.add_argument("--unaligned", action="store_true", help="fix one random pose per instance")
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train and checkpoint each epoch")
    p.add_argument("--config", default=None, help="run configuration file")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--out", default="checkpoint.i3dc")
    p.add_argument("--dataset", default=None, help="override the config dataset path")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)

    p = sub.add_parser("embed", help="write an embedding table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--layer", type=int, choices=(6, 7), default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("cluster", help="k-means + AMI on embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--k", type=int, default=40)
    p.add_argument("--labels", default=None)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("probe", help="linear-probe accuracy")
    p.add_argument("--train-emb", required=True)
    p.add_argument("--test-emb", required=True)

    p = sub.add_parser("retrieve", help="nearest neighbors of a query")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--n", type=int, default=5)

    p = sub.add_parser("invariance", help="rotation-invariance report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--shapes", type=int, default=10)
    p.add_argument("--rotations", type=int, default=50)
    p.add_argument("--layer", type=int, choices=(6, 7), default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write the PCA projection CSV here")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_gen_data(args) -> int:
    rng = np.random.default_rng(args.seed)
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    dataset = data.synth_dataset(
        classes,
        per_class=args.per_class,
        n_points=args.points,
        jitter=args.jitter,
        aligned=not args.unaligned,
        rng=rng,
        split=args.split,
    )
    data.save_dataset(args.out, dataset)
    print(f"instances={len(dataset)}")
    print(f"classes={len(classes)}")
    return 0


def _cmd_train(args) -> int:
    resume = training.load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        config = resume.config
    elif args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = training.parse_run_config(fh.read())
    else:
        raise UsageError("train requires --config or --resume")
    overrides = {}
    if args.dataset is not None:
        overrides["dataset"] = args.dataset
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.lr is not None:
        overrides["lr"] = args.lr
    if overrides:
        if resume is not None:
            raise UsageError("flag overrides are not allowed together with --resume")
        from dataclasses import replace

        config = replace(config, **overrides).validate()
    if not config.dataset:
        raise UsageError("no dataset configured; set 'dataset' in the config file")
    dataset = data.load_dataset(config.dataset)
    result = training.train(
        dataset,
        config,
        out_path=args.out,
        resume=resume,
        log=lambda epoch, loss: print(f"epoch={epoch} loss={loss:.6f}", flush=True),
    )
    print(f"epochs_run={len(result.epoch_losses) + (resume.epoch if resume else 0)}")
    print(f"checkpoint={args.out}")
    return 0


def _cmd_embed(args) -> int:
    ckpt = training.load_checkpoint(args.ckpt)
    dataset = data.load_dataset(args.dataset)
    layer = args.layer if args.layer is not None else ckpt.config.layer_tap
    clouds = np.stack([inst.points for inst in dataset.instances])
    vectors = embed_many(ckpt.params, clouds, layer_tap=layer)
    labels = None
    if all(inst.label is not None for inst in dataset.instances):
        labels = np.array([inst.label for inst in dataset.instances])
    table = EmbeddingTable(
        ids=[inst.name for inst in dataset.instances], vectors=vectors, labels=labels
    )
    evaluation.save_embeddings(args.out, table)
    print(f"rows={vectors.shape[0]}")
    print(f"dim={vectors.shape[1]}")
    return 0


def _cmd_cluster(args) -> int:
    table = evaluation.load_embeddings(args.embeddings, labels_path=args.labels)
    result = evaluation.kmeans(
        table.vectors, args.k, rng=np.random.default_rng(args.seed)
    )
    print(f"inertia={result.inertia:.9g}")
    if table.labels is not None:
        print(f"ami={evaluation.ami(table.labels, result.assignments):.6f}")
    return 0


def _cmd_probe(args) -> int:
    train_table = evaluation.load_embeddings(args.train_emb)
    test_table = evaluation.load_embeddings(args.test_emb)
    acc = evaluation.linear_probe(train_table, test_table)
    print(f"accuracy={acc:.6f}")
    return 0


def _cmd_retrieve(args) -> int:
    table = evaluation.load_embeddings(args.embeddings)
    ranked = evaluation.retrieve(table, args.query, args.n)
    writer = csv.writer(sys.stdout)
    writer.writerow(["id", "distance"])
    for name, dist in ranked:
        writer.writerow([name, f"{dist:.9g}"])
    return 0


def _cmd_invariance(args) -> int:
    ckpt = training.load_checkpoint(args.ckpt)
    dataset = data.load_dataset(args.dataset)
    if args.shapes > len(dataset):
        raise UsageError(f"dataset has only {len(dataset)} instances")
    layer = args.layer if args.layer is not None else ckpt.config.layer_tap
    shapes = [inst.points for inst in dataset.instances[: args.shapes]]
    rng = np.random.default_rng(args.seed)
    report = evaluation.invariance_report(
        shapes,
        args.rotations,
        rng,
        embed_fn=lambda cloud: embed_many(ckpt.params, cloud[None], layer_tap=layer)[0],
    )
    print(f"ami={report.ami:.6f}")
    print(f"intra_cosine={report.intra_cosine:.6f}")
    print(f"inter_cosine={report.inter_cosine:.6f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["shape", "pc1", "pc2"])
            for s, (x, y) in zip(report.shape_index, report.projection):
                writer.writerow([int(s), f"{x:.9g}", f"{y:.9g}"])
    return 0


def _cmd_gradcheck(args) -> int:
    report = gradcheck.run_gradcheck(seed=args.seed)
    for which, err in sorted(report.per_loss.items()):
        print(f"max_rel_err_{which}={err:.3e}")
    print(f"max_rel_err={report.max_error:.3e}")
    print(f"coordinates={report.n_coordinates}")
    if not report.passed:
        print("gradient check failed", file=sys.stderr)
        return 2
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "embed": _cmd_embed,
    "cluster": _cmd_cluster,
    "probe": _cmd_probe,
    "retrieve": _cmd_retrieve,
    "invariance": _cmd_invariance,
    "gradcheck": _cmd_gradcheck,
}


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    limiter = None
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures exit 2 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        if limiter is not None:
            limiter.unregister()


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
