"""``samcnn`` command line: prepare, train, rerank, evaluate, sigtest, export-hidden, bench.

Exit codes: 0 success, 2 usage error, 3 data-format error, 4 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import (
    BundleError,
    atomic_text,
    convert_topics,
    file_sha256,
    format_stats,
    load_bundle,
    prepare_bundle,
    read_corpus,
    read_manifest,
    read_topics,
    staged_dir,
    write_manifest,
)
from .model import collate, export_hidden
from .tensor import GraphError, ShapeError, no_grad
from .text import EmbeddingFormatError
from .trainer import (
    CheckpointError,
    ConfigError,
    config_hash,
    cross_validate,
    format_config,
    load_checkpoint,
    make_fold_plan,
    model_from_checkpoint,
    parse_config,
    save_checkpoint,
    score_instances,
    ql_scores,
)
from .treceval import (
    TrecFormatError,
    evaluate_run,
    fisher_randomization,
    interpolate,
    mean_metrics,
    parse_qrels,
    parse_run,
    per_query_report,
    run_from_scores,
    write_run,
)

log = logging.getLogger("samcnn")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_RUNTIME = 0, 2, 3, 4
SEED_ENV = "SAMCNN_SEED"


class UsageError(Exception):
    pass


def _manifest_path(output: Path) -> Path:
    return output.with_name(output.name + ".manifest.json")


def _resolve_seed(flag: int | None) -> int | None:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _configs(args):
    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    overrides = _overrides(args.set)
    seed = _resolve_seed(args.seed)
    if seed is not None and (args.seed is not None or "seed" not in _keys(text)):
        overrides.setdefault("seed", str(seed))
    return parse_config(text, overrides)


def _keys(text: str) -> set[str]:
    return {ln.split("#", 1)[0].split("=", 1)[0].strip() for ln in text.splitlines() if "=" in ln.split("#", 1)[0]}


def _checkpoint_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(path.glob("fold_*.ckpt"))
        if not files:
            raise UsageError(f"{path}: no fold_*.ckpt files")
        return files
    return [path]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_convert_topics(args) -> int:
    pairs = convert_topics(Path(args.markup).read_text(encoding="utf-8"))
    atomic_text(args.out, "".join(f"{q}\t{t}\n" for q, t in pairs))
    print(f"wrote {len(pairs)} topics to {args.out}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    seed = _resolve_seed(args.seed)
    seed = 0 if seed is None else seed
    docs = read_corpus(args.corpus)
    topics, years = read_topics(args.topics)
    run = parse_run(args.run)
    qrels = parse_qrels(args.qrels) if args.qrels else None
    inputs = {"corpus": file_sha256(args.corpus), "topics": file_sha256(args.topics), "run": file_sha256(args.run)}
    if args.qrels:
        inputs["qrels"] = file_sha256(args.qrels)
    if args.embeddings:
        inputs["embeddings"] = file_sha256(args.embeddings)
    stats = prepare_bundle(docs, topics, run, args.out, qrels=qrels, years=years, embeddings_path=args.embeddings,
                           dim=args.dim, seed=seed, inputs=inputs)
    sys.stdout.write(format_stats(stats))
    print(f"bundle {read_manifest(Path(args.out) / 'manifest.json')['bundle_hash']}")
    return EXIT_OK


def cmd_train(args) -> int:
    model_config, train_config = _configs(args)
    bundle = load_bundle(args.bundle)
    if bundle.qrels is None and any(i.label is None for y in bundle.data.values() for i in y):
        raise UsageError("training needs a bundle prepared with --qrels")
    if args.folds:
        wanted = set(args.folds.split(","))
        folds = [f for f in make_fold_plan(bundle.years) if f.test_year in wanted]
    else:
        folds = make_fold_plan(bundle.years)
    digest = config_hash(model_config, train_config)
    with staged_dir(args.out) as stage:
        result = cross_validate(bundle.data, bundle.embeddings, model_config, train_config, bundle.qrels,
                                folds, log_dir=stage, workers=args.parallel_folds)
        for year, ckpt in sorted(result.checkpoints.items()):
            save_checkpoint(ckpt, stage / f"fold_{year}.ckpt")
            print(f"fold {year}: epoch {ckpt.epoch} val AP {ckpt.val_metric:.4f} alpha {ckpt.alpha}")
        (stage / "config.txt").write_text(format_config(model_config, train_config), encoding="utf-8")
        write_manifest(stage / "manifest.json", "train", config_hash=digest, seed=train_config.seed,
                       bundle_hash=bundle.manifest.get("bundle_hash"), folds=[f.test_year for f in folds])
    return EXIT_OK


def cmd_rerank(args) -> int:
    bundle = load_bundle(args.bundle)
    neural, ql, mixed, hashes, seeds = {}, {}, {}, set(), set()
    for path in _checkpoint_files(Path(args.checkpoints)):
        ckpt = load_checkpoint(path)
        year = args.year or ckpt.test_year
        if year not in bundle.data:
            raise UsageError(f"bundle has no instances for year {year}")
        model = model_from_checkpoint(ckpt, bundle.vocab)
        scores = score_instances(model, bundle.data[year])
        base = ql_scores(bundle.data[year])
        neural.update(scores)
        ql.update(base)
        alpha = ckpt.alpha if args.alpha is None else args.alpha
        mixed.update(interpolate(scores, base, alpha, tag=args.tag + "+QL"))
        hashes.add(ckpt.config_hash)
        seeds.add(ckpt.train_config.seed)
    run = mixed if args.interpolate else run_from_scores(neural, args.tag)
    out = Path(args.out)
    write_run(run, out)
    write_manifest(_manifest_path(out), "rerank", config_hash=sorted(hashes)[0] if len(hashes) == 1 else sorted(hashes),
                   seed=sorted(seeds)[0] if len(seeds) == 1 else sorted(seeds),
                   interpolated=bool(args.interpolate), bundle_hash=bundle.manifest.get("bundle_hash"))
    print(f"wrote {sum(len(v) for v in run.values())} entries for {len(run)} queries to {out}")
    return EXIT_OK


def _check_run_manifest(run_path: Path, checkpoints: str | None, force: bool) -> None:
    if checkpoints is None:
        return
    want = {load_checkpoint(p).config_hash for p in _checkpoint_files(Path(checkpoints))}
    manifest = _manifest_path(run_path)
    have = read_manifest(manifest).get("config_hash") if manifest.is_file() else None
    have = set(have) if isinstance(have, list) else {have}
    if have != want:
        msg = f"{run_path}: run manifest config hash {sorted(map(str, have))} does not match the checkpoints"
        if not force:
            raise RuntimeError(msg + " (use --force to evaluate anyway)")
        log.warning(msg)


def cmd_evaluate(args) -> int:
    run_path = Path(args.run)
    _check_run_manifest(run_path, args.checkpoints, args.force)
    qrels = parse_qrels(args.qrels)
    per_query = evaluate_run(parse_run(run_path), qrels)
    mean = mean_metrics(per_query)
    lines = ["qid\tAP\tP30"] + [f"{q}\t{m.ap:.4f}\t{m.p30:.4f}" for q, m in sorted(per_query.items())]
    lines.append(f"all\t{mean.ap:.4f}\t{mean.p30:.4f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_text(args.out, text)
        write_manifest(_manifest_path(Path(args.out)), "evaluate", run=file_sha256(run_path),
                       qrels=file_sha256(args.qrels))
    sys.stdout.write(text if args.per_query else lines[0] + "\n" + lines[-1] + "\n")
    return EXIT_OK


def cmd_sigtest(args) -> int:
    qrels = parse_qrels(args.qrels)
    systems = {}
    for spec in args.runs:
        name, _, path = spec.rpartition("=")
        name = name or Path(path).stem
        systems[name] = {q: m.ap for q, m in evaluate_run(parse_run(path), qrels).items()}
    if len(systems) < 2:
        raise UsageError("sigtest needs at least two runs")
    seed = _resolve_seed(args.seed)
    seed = 0 if seed is None else seed
    names = list(systems)
    lines = ["system_a\tsystem_b\tmean_AP_a\tmean_AP_b\tp_value"]
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            p = fisher_randomization(systems[a], systems[b], args.iterations, seed, exhaustive=args.exhaustive)
            ma = float(np.mean(list(systems[a].values())))
            mb = float(np.mean(list(systems[b].values())))
            lines.append(f"{a}\t{b}\t{ma:.4f}\t{mb:.4f}\t{p:.6g}")
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_text(args.out, text)
        write_manifest(_manifest_path(Path(args.out)), "sigtest", seed=seed, iterations=args.iterations)
    if args.report:
        if len(names) != 2:
            raise UsageError("--report needs exactly two runs")
        paths = [spec.rpartition("=")[2] for spec in args.runs]
        per_query_report(parse_run(paths[0]), parse_run(paths[1]), qrels, args.report, (names[0], names[1]))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_export_hidden(args) -> int:
    bundle = load_bundle(args.bundle)
    ckpt = load_checkpoint(args.checkpoint)
    year = args.year or ckpt.test_year
    if year not in bundle.data:
        raise UsageError(f"bundle has no instances for year {year}")
    model = model_from_checkpoint(ckpt, bundle.vocab)
    instances = bundle.data[year]
    if args.limit:
        instances = instances[: args.limit]
    out = export_hidden(model, instances, args.out)
    write_manifest(_manifest_path(out), "export-hidden", config_hash=ckpt.config_hash, seed=ckpt.train_config.seed,
                   year=year, rows=len(instances))
    print(f"wrote {len(instances)} rows to {out}")
    return EXIT_OK


def bench_throughput(model, instances, batch_size: int, repeats: int, rng_seed: int = 0) -> dict[str, float]:
    """Median instances/second for eval forward and for train forward+backward."""
    batch_items = [instances[i % len(instances)] for i in range(batch_size)]
    batch = collate(batch_items, model.config.kernel_size)
    rng = np.random.default_rng(rng_seed)
    saved = model.state()
    fwd, both = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        with no_grad():
            model.forward_batch(batch, train=False)
        fwd.append(batch_size / (time.perf_counter() - t0))
        t0 = time.perf_counter()
        loss = model.loss(batch_items, train=True, rng=rng)
        loss.backward()
        both.append(batch_size / (time.perf_counter() - t0))
        for t in model.parameters().values():
            t.grad = None
    model.load_state(saved)
    return {"forward": float(np.median(fwd)), "forward_backward": float(np.median(both)),
            "forward_spread": float((max(fwd) - min(fwd)) / np.median(fwd)),
            "forward_backward_spread": float((max(both) - min(both)) / np.median(both))}


def cmd_bench(args) -> int:
    bundle = load_bundle(args.bundle)
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt, bundle.vocab)
    # unlabeled bundles still time the backward pass; the label value does not change the cost
    instances = [replace(i, label=i.label or 0) for y in bundle.years for i in bundle.data[y]]
    if not instances:
        raise UsageError("bundle has no instances")
    report = bench_throughput(model, instances, args.batch_size, args.repeats)
    lines = [f"variant\t{ckpt.model_config.variant}", f"batch_size\t{args.batch_size}",
             f"repeats\t{args.repeats}",
             f"forward_instances_per_s\t{report['forward']:.1f}",
             f"forward_backward_instances_per_s\t{report['forward_backward']:.1f}"]
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_text(args.out, text)
        write_manifest(_manifest_path(Path(args.out)), "bench", config_hash=ckpt.config_hash,
                       seed=ckpt.train_config.seed)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="samcnn", description="samCNN neural reranking for short texts.")
    parser.add_argument("--version", action="version", version=f"samcnn {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert-topics", help="TREC <top> topic markup to a qid/query TSV")
    p.add_argument("markup")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert_topics)

    p = sub.add_parser("prepare", help="build a dataset bundle from corpus, topics and a QL run")
    p.add_argument("--corpus", required=True, help="TSV: docid, text")
    p.add_argument("--topics", required=True, help="TSV: qid, query[, year]")
    p.add_argument("--run", required=True, help="first-stage (QL) TREC run")
    p.add_argument("--qrels", help="relevance judgments; required for training")
    p.add_argument("--embeddings", help="GloVe-style text vectors; random U[-0.05, 0.05] rows if omitted")
    p.add_argument("--dim", type=int, default=300)
    p.add_argument("--seed", type=int, help=f"OOV initialization seed (falls back to ${SEED_ENV}, then 0)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="four-fold leave-one-year-out training")
    p.add_argument("--bundle", required=True)
    p.add_argument("--config", help="key = value file of model and training settings")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, help=f"overrides the config seed; ${SEED_ENV} is the fallback")
    p.add_argument("--folds", help="comma-separated test years to run (default: all)")
    p.add_argument("--parallel-folds", type=int, default=1, metavar="N", help="train N folds concurrently")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rerank", help="score each fold's test year and write a TREC run")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoints", required=True, help="a checkpoint file or a train output directory")
    p.add_argument("--year", help="score this year instead of each checkpoint's test year")
    p.add_argument("--interpolate", action="store_true", help="mix with the QL scores (alpha from the fold)")
    p.add_argument("--alpha", type=float, help="override the tuned interpolation weight")
    p.add_argument("--tag", default="samcnn")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("evaluate", help="mean and per-query AP / P30")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--checkpoints", help="refuse runs whose manifest config hash differs from these")
    p.add_argument("--force", action="store_true", help="evaluate despite a manifest mismatch")
    p.add_argument("--per-query", action="store_true", help="print every query, not only the mean")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sigtest", help="paired randomization tests on AP between runs")
    p.add_argument("--qrels", required=True)
    p.add_argument("runs", nargs="+", metavar="NAME=RUN")
    p.add_argument("--iterations", type=int, default=100_000)
    p.add_argument("--exhaustive", action="store_true", default=None, help="enumerate all sign flips (n <= 20)")
    p.add_argument("--seed", type=int)
    p.add_argument("--report", help="per-query AP difference TSV (two runs only)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sigtest)

    p = sub.add_parser("export-hidden", help="write the hidden state o of every candidate as TSV")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--year")
    p.add_argument("--limit", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_hidden)

    p = sub.add_parser("bench", help="forward and forward+backward throughput")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch-size", type=int, default=300)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"samcnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrecFormatError, EmbeddingFormatError, BundleError, CheckpointError, json.JSONDecodeError,
            UnicodeDecodeError) as exc:
        print(f"samcnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (RuntimeError, ArithmeticError, ShapeError, GraphError, ValueError, OSError) as exc:
        print(f"samcnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
