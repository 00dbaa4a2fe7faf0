"""Command-line surface.

Subcommands: gen-data, train, encode, search, evaluate, ablate, gradcheck.
Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 runtime
numeric failure. CMM_THREADS caps internal parallelism (default 1; this
implementation is single-threaded, so any positive value is accepted).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import storage
from .config import parse_config, serialize_config
from .encoders import ConfigError
from .retrieval import Gallery, evaluate, k_reciprocal_rerank, rankings_from_scores
from .storage import StorageError
from .synth_data import generate_dataset
from .training import (NumericError, encode_split, load_checkpoint,
                       run_ablation, run_training)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

_REPORT_COLUMNS = ("direction", "reranked", "rank1", "rank5", "rank10", "map")
_ABLATION_COLUMNS = ("variant", "seed", "direction", "reranked",
                     "rank1", "rank5", "rank10", "map")


def _threads_cap():
    raw = os.environ.get("CMM_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"CMM_THREADS must be a positive integer, got {raw!r}")
    if cap < 1:
        raise ConfigError(f"CMM_THREADS must be >= 1, got {cap}")
    return cap


def _load_config(path):
    if path is None:
        return parse_config("")
    return parse_config(Path(path).read_text())


def _fmt_cell(v):
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_delimited(path, columns, rows):
    lines = ["\t".join(columns)]
    for row in rows:
        lines.append("\t".join(_fmt_cell(row[c]) for c in columns))
    text = "\n".join(lines) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def cmd_gen_data(args):
    cfg = _load_config(args.config)
    dataset = generate_dataset(cfg.data)
    storage.write_dataset(args.out, dataset)
    counts = {s: len(dataset.ids_for(s)) for s in ("train", "val", "test")}
    print(f"wrote {args.out}: {len(dataset.records)} records, "
          f"ids per split {counts}, vocab size {dataset.vocab_size}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args.config)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    dataset = storage.read_dataset(args.data)
    try:
        result = run_training(dataset, cfg, out_dir=args.out, resume=args.resume)
    except NumericError as e:
        print(f"training aborted on non-finite loss; diagnostics: "
              f"{e.snapshot_path}", file=sys.stderr)
        return EXIT_NUMERIC
    final = result.trace[-1] if result.trace else None
    print(f"trained {cfg.train.epochs} epochs -> {args.out}; "
          f"final: {final if final else 'no epochs run'}")
    return EXIT_OK


def cmd_encode(args):
    _, model, _, _, _, _ = load_checkpoint(args.checkpoint)
    dataset = storage.read_dataset(args.data)
    embeddings, ids = encode_split(model, dataset, args.split, args.modality)
    storage.write_feature_store(args.out, embeddings, ids, args.modality)
    print(f"wrote {args.out}: {embeddings.shape[0]} x {embeddings.shape[1]} "
          f"{args.modality} features from split {args.split!r}")
    return EXIT_OK


def _load_stores(query_path, gallery_path):
    q_emb, q_ids, q_mod = storage.read_feature_store(query_path)
    g_emb, g_ids, g_mod = storage.read_feature_store(gallery_path)
    if q_emb.shape[1] != g_emb.shape[1]:
        raise StorageError(
            f"dimension mismatch between stores: {q_emb.shape[1]} vs {g_emb.shape[1]}")
    return (Gallery(q_emb, q_ids, q_mod), Gallery(g_emb, g_ids, g_mod))


def cmd_search(args):
    queries, gallery = _load_stores(args.query, args.gallery)
    cfg = _load_config(args.config)
    scores = queries.embeddings @ gallery.embeddings.T
    if args.rerank == "on":
        scores = k_reciprocal_rerank(queries.embeddings, gallery, scores, cfg.rerank)
    order = np.argsort(-scores, axis=1, kind="stable")
    rows = []
    for qi in range(len(queries)):
        for rank in range(min(args.topk, len(gallery))):
            gi = int(order[qi, rank])
            rows.append({"query": qi, "rank": rank + 1, "gallery": gi,
                         "gallery_id": int(gallery.identities[gi]),
                         "score": float(scores[qi, gi])})
    _write_delimited(args.out, ("query", "rank", "gallery", "gallery_id", "score"), rows)
    return EXIT_OK


def _report_rows(reports, which):
    rows = []
    for (direction, reranked), rep in sorted(reports.items()):
        if which == "on" and not reranked:
            continue
        if which == "off" and reranked:
            continue
        rows.append({"direction": direction, "reranked": reranked,
                     "rank1": rep.rank_k.get(1, float("nan")),
                     "rank5": rep.rank_k.get(5, float("nan")),
                     "rank10": rep.rank_k.get(10, float("nan")),
                     "map": rep.map_score})
    return rows


def cmd_evaluate(args):
    queries, gallery = _load_stores(args.query, args.gallery)
    if queries.modality == "text":
        text_store, image_store = queries, gallery
    else:
        text_store, image_store = gallery, queries
    cfg = _load_config(args.config)
    reports = evaluate(text_store, image_store, cfg.rerank)
    _write_delimited(args.report, _REPORT_COLUMNS, _report_rows(reports, args.rerank))
    if args.plot:
        from . import plots
        plots.plot_rank_curves(reports, args.plot)
        if args.metrics_log:
            trace = storage.parse_metrics_log(Path(args.metrics_log).read_text())
            loss_path = str(Path(args.plot).with_suffix("")) + "_training.svg"
            plots.plot_training_curves(trace, loss_path)
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_config(args.config)
    dataset = storage.read_dataset(args.data)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    kwargs = {}
    if args.queue_sizes:
        kwargs["queue_sizes"] = tuple(int(s) for s in args.queue_sizes.split(","))
    rows = run_ablation(dataset, cfg, args.axis, seeds=seeds, **kwargs)
    _write_delimited(args.out, _ABLATION_COLUMNS, rows)
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_suite
    corrupt = os.environ.get("CMM_GRADCHECK_CORRUPT") or None
    results = run_suite(seed=args.seed, instances=args.instances, corrupt=corrupt)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.family}: max rel err {r.max_rel_err:.3e} "
              f"over {r.instances} instances (tol {r.tol:.0e})")
        ok = ok and r.passed
    if not ok:
        failing = ", ".join(r.family for r in results if not r.passed)
        print(f"gradient check failed: {failing}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cmm",
        description="Cross-modal momentum contrastive retrieval at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("--config", help="config file (defaults apply when omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a split into a feature store")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--modality", required=True, choices=("image", "text"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("search", help="rank a gallery store for each query")
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--rerank", choices=("on", "off"), default="off")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("evaluate", help="bidirectional Rank-K / mAP report")
    p.add_argument("--query", required=True, help="text feature store")
    p.add_argument("--gallery", required=True, help="image feature store")
    p.add_argument("--rerank", choices=("on", "off", "both"), default="both")
    p.add_argument("--report", help="output path (stdout when omitted)")
    p.add_argument("--config")
    p.add_argument("--plot", help="also render Rank-K curves to this SVG path")
    p.add_argument("--metrics-log", help="training log for the loss-curve figure")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train/evaluate ablation variants")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--axis", required=True,
                   choices=("queue_size", "cmc_on_off", "rerank"))
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--queue-sizes", help="comma list for the queue_size axis")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="run the gradient-check suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _threads_cap()
        return args.func(args)
    except (ConfigError, StorageError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
