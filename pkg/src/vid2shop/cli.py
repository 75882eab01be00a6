"""Command-line entry point: ``python -m vid2shop <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error (bad or missing input,
failed check).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import io as vio
from .attention import percentile_curve
from .dedup import DedupConfig, DedupError, find_duplicates, read_pgm_dir
from .evaluation import METHODS, EvalConfig, GalleryIndex, bootstrap_eval, evaluate_records, per_class_report
from .heads import HeadDims, Model, SingleFrameHead
from .synthetic import SynthConfig, generate_dataset, generate_gallery, source_domain, split_by_class
from .tracking import TrackingConfig
from .training import (
    PretrainConfig,
    TrainConfig,
    TrainingError,
    end_to_end_grad_check,
    pairs_from_records,
    pretrain_single,
    train_target,
)
from .types import check_gallery_refs

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("cut-offs must be positive")
    return values


def _method_list(text: str) -> list:
    values = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in values if v not in METHODS]
    if bad or not values:
        raise argparse.ArgumentTypeError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
    return values


def _provenance(args) -> str:
    # --jobs changes scheduling only, never the numbers
    skip = {"func", "command", "jobs"}
    items = [f"{k}={v}" for k, v in sorted(vars(args).items()) if k not in skip]
    return f"# vid2shop {args.command} " + " ".join(items)


def _write_csv(path, args, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    buf.write(_provenance(args) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
    _emit(path, buf.getvalue())


def _emit(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _tracking(args) -> TrackingConfig:
    return TrackingConfig(args.prop_thresh, args.pivot_thresh, args.max_tracklets)


def _load_model(path) -> Model:
    store = vio.load_checkpoint(path)
    if "mf.embed.W" not in store:
        raise vio.FormatError(path, "checkpoint holds no multi-frame head; run `train` first")
    return Model.from_params(store)


def _load_inputs(args):
    records = vio.load_dataset(args.data)
    gallery = vio.load_gallery(args.gallery)
    check_gallery_refs(records, gallery)
    return records, gallery


# -- commands --------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    if args.split and args.test_sequences:
        raise UsageError("--split and --test-sequences both write the .test file; pick one")
    cfg = SynthConfig(
        gallery_size=args.gallery_size,
        n_classes=args.classes,
        n_sequences=args.sequences,
        frames_per_sequence=args.frames,
        feature_dim=args.dim,
        noise_sigma=args.noise,
        distractor_rate=args.distractor_rate,
        occlusion_rate=args.occlusion_rate,
        seed=args.seed,
        visibility=(args.vis_min, 1.0),
        clutter=args.clutter,
        instance_sigma=args.instance_sigma,
    )
    gallery, protos = generate_gallery(cfg)
    records = generate_dataset(cfg, protos)
    out = args.out
    vio.save_gallery(f"{out}.gal.jsonl", gallery)
    vio.save_prototypes(f"{out}.proto.jsonl", protos)
    vio.save_dataset(f"{out}.seq.jsonl", records)
    if args.split:
        train, test = split_by_class(records, gallery, args.split, args.seed)
        vio.save_dataset(f"{out}.train.seq.jsonl", train)
        vio.save_dataset(f"{out}.test.seq.jsonl", test)
    if args.test_sequences:
        held_out = generate_dataset(cfg, protos, n=args.test_sequences, start=cfg.n_sequences)
        vio.save_dataset(f"{out}.test.seq.jsonl", held_out)
    if args.source_sequences:
        sgal, srecs = source_domain(cfg, args.source_sequences)
        vio.save_gallery(f"{out}.src.gal.jsonl", sgal)
        vio.save_dataset(f"{out}.src.seq.jsonl", srecs)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    records, gallery = _load_inputs(args)
    pairs = pairs_from_records(records, gallery, args.negatives, args.seed)
    if not pairs:
        raise ValueError("no annotated detections to pretrain on")
    cfg = PretrainConfig(args.embed_dim, args.lr, args.momentum, args.epochs, args.batch_size, args.seed)
    history: list = []
    head = SingleFrameHead.init(HeadDims(conv_dim=pairs[0][0].shape[0], embed_dim=args.embed_dim), args.seed)
    head = pretrain_single(pairs, cfg, head, history) if args.epochs > 0 else head
    vio.save_checkpoint(args.out, head.params)
    if args.log:
        _write_csv(args.log, args, ["epoch", "loss", "accuracy"], [(e, l, a) for e, l, a in history])
    return EXIT_OK


def cmd_train(args) -> int:
    records, gallery = _load_inputs(args)
    store = vio.load_checkpoint(args.init)
    sf = SingleFrameHead(store.subset("sf."))
    cfg = TrainConfig(
        T=args.T,
        lr=args.lr,
        momentum=args.momentum,
        epochs=args.epochs,
        batch_size=args.batch_size,
        negatives_per_positive=args.negatives,
        seed=args.seed,
        nlb_dim=args.nlb_dim,
        variant=args.variant,
        multi_weight=args.multi_weight,
        single_weight=args.single_weight,
        tracking=_tracking(args),
    )
    result = train_target(records, gallery, sf, cfg)
    vio.save_checkpoint(args.out, result.model.params())
    if args.log:
        rows = [(h.epoch, h.multi_loss, h.single_loss, h.positives, h.skipped_records) for h in result.history]
        _write_csv(args.log, args, ["epoch", "multi_loss", "single_loss", "positives", "skipped_records"], rows)
    return EXIT_OK


def cmd_rank(args) -> int:
    records, gallery = _load_inputs(args)
    model = _load_model(args.model)
    cfg = EvalConfig(T=args.T, method=args.method, seed=args.seed, class_filter=args.class_filter)
    results = evaluate_records(records, gallery, model, cfg, _tracking(args), args.jobs, keep_rankings=True)
    lines = []
    for q in results:
        entries = q.ranking.entries[: args.top] if q.ranking is not None else []
        lines.append(
            json.dumps(
                {
                    "query_id": q.query_id,
                    "target": q.target_item,
                    "rank": q.rank,
                    "ranking": [[iid, round(float(s), 8)] for iid, s in entries],
                },
                separators=(",", ":"),
            )
        )
    _emit(args.out, "".join(line + "\n" for line in lines))
    return EXIT_OK


def cmd_eval(args) -> int:
    records, gallery = _load_inputs(args)
    model = _load_model(args.model)
    index = GalleryIndex(gallery, model)
    rows, class_rows = [], []
    for method in args.method:
        cfg = EvalConfig(T=args.T, ks=tuple(args.k), method=method, seed=args.seed, class_filter=args.class_filter)
        results = evaluate_records(records, gallery, model, cfg, _tracking(args), args.jobs, index=index)
        for r in bootstrap_eval(results, args.k, args.pool_size, args.repeats, args.seed):
            rows.append((method, r.k, r.mean, r.std, r.n_queries))
        if args.per_class:
            for c in per_class_report(results, gallery, args.k, args.pool_size, args.repeats, args.seed):
                class_rows.append((method, c.class_label, c.k, c.mean, c.std, c.n_queries))
    _write_csv(args.out, args, ["method", "k", "mean", "std", "n_queries"], rows)
    if args.per_class:
        _write_csv(args.per_class, args, ["method", "class", "k", "mean", "std", "n_queries"], class_rows)
    return EXIT_OK


def cmd_attn_report(args) -> int:
    records = vio.load_dataset(args.data)
    model = _load_model(args.model)
    points = percentile_curve(records, model.multi, args.samples)
    _write_csv(args.out, args, ["percentile", "mean", "std"], [(p.percentile, p.mean, p.std) for p in points])
    return EXIT_OK


def cmd_dedup(args) -> int:
    images = read_pgm_dir(args.images)
    cfg = DedupConfig(radius=args.radius, threshold=args.threshold, seed=args.seed)
    groups, _ = find_duplicates(images, cfg)
    text = "".join(json.dumps({"group": g}, separators=(",", ":")) + "\n" for g in groups if len(g) > 1 or args.all)
    _emit(args.out, text)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    report = end_to_end_grad_check(args.seed, args.T, args.conv_dim, args.embed_dim, args.nlb_dim, tol=args.tol)
    for line in report.lines():
        print(line)
    print(f"max relative error {report.max_error:.3e} (tol {args.tol:g}): {'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_DATA


# -- parser ----------------------------------------------------------------


def _add_tracking(p) -> None:
    p.add_argument("--prop-thresh", type=float, default=0.5, help="propagation threshold (default 0.5)")
    p.add_argument("--pivot-thresh", type=float, default=0.7, help="training pivot threshold (default 0.7)")
    p.add_argument("--max-tracklets", type=int, default=8, help="tracklets per query (default 8)")


def _add_inputs(p) -> None:
    p.add_argument("--data", required=True, help="sequence file (.seq.jsonl)")
    p.add_argument("--gallery", required=True, help="gallery file (.gal.jsonl)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vid2shop", description="Video-to-shop retrieval toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-synth", help="generate a synthetic benchmark")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--gallery-size", type=int, default=200)
    p.add_argument("--classes", type=int, default=13)
    p.add_argument("--sequences", type=int, default=100)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--dim", type=int, default=64, help="conv feature size")
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--distractor-rate", type=float, default=0.5)
    p.add_argument("--occlusion-rate", type=float, default=0.1)
    p.add_argument("--vis-min", type=float, default=0.3, help="lowest frame visibility")
    p.add_argument("--clutter", type=float, default=0.0)
    p.add_argument("--instance-sigma", type=float, default=0.0)
    p.add_argument("--split", type=float, default=0.0, help="also write a per-class train/test split")
    p.add_argument("--test-sequences", type=int, default=0, help="also write this many held-out sequences")
    p.add_argument("--source-sequences", type=int, default=0, help="also write a pretraining domain")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("pretrain", help="fit the single-frame head on annotated detections")
    _add_inputs(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--embed-dim", type=int, default=256)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--negatives", type=int, default=1)
    p.add_argument("--log", help="per-epoch CSV")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="pseudo-labelled multi-frame training")
    _add_inputs(p)
    p.add_argument("--init", required=True, help="pretrained checkpoint")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--T", type=int, default=10, help="frames per sampled clip")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--negatives", type=int, default=3)
    p.add_argument("--nlb-dim", type=int, default=128)
    p.add_argument("--variant", choices=["seam", "seam_no_nlb", "seam_no_nlb_no_g"], default="seam")
    p.add_argument("--multi-weight", type=float, default=1.0)
    p.add_argument("--single-weight", type=float, default=1.0)
    p.add_argument("--log", help="per-epoch CSV")
    p.add_argument("--seed", type=int, default=0)
    _add_tracking(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rank", help="rank the gallery for every sequence")
    _add_inputs(p)
    p.add_argument("--model", required=True)
    p.add_argument("--method", choices=METHODS, default="seam")
    p.add_argument("--T", type=int, default=10)
    p.add_argument("--top", type=int, default=20, help="entries kept per ranking")
    p.add_argument("--class-filter", action="store_true")
    p.add_argument("--out", default="-", help="JSON lines output (default stdout)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    _add_tracking(p)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("eval", help="bootstrap top-k accuracy")
    _add_inputs(p)
    p.add_argument("--model", required=True)
    p.add_argument("--method", type=_method_list, default=["seam"], help="comma-separated methods")
    p.add_argument("--k", type=_int_list, default=[1, 5, 10, 20], help="comma-separated cut-offs")
    p.add_argument("--T", type=int, default=10)
    p.add_argument("--pool-size", type=int, default=800)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--class-filter", action="store_true")
    p.add_argument("--per-class", help="also write a per-class CSV here")
    p.add_argument("--out", default="-", help="CSV output (default stdout)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    _add_tracking(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn-report", help="attention percentile curve as CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--samples", type=int, default=21)
    p.add_argument("--out", default="-")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_attn_report)

    p = sub.add_parser("dedup", help="group near-duplicate PGM images")
    p.add_argument("--images", required=True, help="directory of binary PGM files")
    p.add_argument("--radius", type=int, default=10)
    p.add_argument("--threshold", type=float, default=10.0, help="max mean pixel difference")
    p.add_argument("--all", action="store_true", help="also list singletons")
    p.add_argument("--out", default="-")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser("grad-check", help="finite-difference check of the training loss")
    p.add_argument("--T", type=int, default=4)
    p.add_argument("--conv-dim", type=int, default=32)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--nlb-dim", type=int, default=8)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return parser


DATA_ERRORS = (vio.FormatError, DedupError, TrainingError, ValueError, OSError, KeyError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # --help exits 0 through argparse
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vid2shop {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"vid2shop {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
