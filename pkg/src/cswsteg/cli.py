"""Command-line interface.

Exit codes: 0 success, 1 operational error (I/O, format, divergence),
2 usage error. Report-producing commands write JSON/CSV plus a rendered
PNG figure next to it; `detect` streams newline-delimited JSON events.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import figures
from .ablation import run_ablation
from .codebook import cnv_partition, gen_codebook
from .dataset import DatasetConfig, DatasetManifest, build_dataset
from .detect import FrameSource, sliding_detect
from .errors import CswstegError
from .evaluation import bench_latency, evaluate, export_features
from .model import ArchConfig, CswModel, load_model, save_model
from .qim import qim_embed
from .streams import read_container, write_container
from .training import HyperParams, train


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


def _load_arch(spec: str | None) -> ArchConfig:
    """An arch spec is a variant letter, 'short-clip', or a JSON file path."""
    if spec is None or spec == "a":
        return ArchConfig()
    if spec == "short-clip":
        return ArchConfig.short_clip()
    if len(spec) == 1 and spec.isalpha():
        return ArchConfig.variant(spec)
    return ArchConfig.from_json_dict(json.loads(Path(spec).read_text()))


def _hyper_from_args(args) -> HyperParams:
    return HyperParams(
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        dropout_rate=args.dropout,
        l2_lambda=args.l2_lambda,
        epochs=args.epochs,
        patience=args.patience,
        seed=args.seed,
        validation_fraction=args.val_fraction,
        dtype=args.dtype,
    )


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--l2-lambda", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")


def cmd_gen(args) -> int:
    raw = json.loads(Path(args.config).read_text())
    if args.out is not None:
        raw["out_dir"] = args.out
    if args.seed is not None:
        raw.setdefault("seeds", {})["master"] = args.seed
    config = DatasetConfig(**raw)
    manifest = build_dataset(config)
    print(
        json.dumps(
            {
                "manifest": str(Path(config.out_dir) / "manifest.json"),
                "entries": len(manifest.entries),
                "train": len(manifest.select("train")),
                "test": len(manifest.select("test")),
            }
        )
    )
    return 0


def cmd_embed(args) -> int:
    cover = read_container(args.cover)
    codebooks = [
        gen_codebook(size, args.codebook_dim, seed=[args.codebook_seed, slot], slot=slot)
        for slot, size in enumerate(cover.codebook_sizes, start=1)
    ]
    partitions = [cnv_partition(cb) for cb in codebooks]
    rng = np.random.default_rng(args.message_seed)
    bits = rng.integers(0, 2, size=3 * cover.n_frames, dtype=np.uint8)
    record = qim_embed(cover, bits, args.rate, partitions, seed=args.seed)
    write_container(
        record.stego,
        args.out,
        metadata={
            "label": "stego",
            "embedding_rate": args.rate,
            "embed_seed": args.seed,
            "message_seed": args.message_seed,
            "codebook_seed": args.codebook_seed,
            "codebook_dim": args.codebook_dim,
        },
    )
    print(
        json.dumps(
            {
                "out": args.out,
                "frames": cover.n_frames,
                "embedded_frames": int(record.mask.sum()),
                "bits": len(record.bits),
            }
        )
    )
    return 0


def cmd_train(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    config = _load_arch(args.arch)
    hyper = _hyper_from_args(args)
    model, history = train(manifest, config, hyper, log=_log)
    out = Path(args.out)
    save_model(
        model,
        out,
        metadata={
            "manifest": str(args.manifest),
            "hyper": hyper.__dict__,
            "best_epoch": history.best_epoch,
            "val_accuracy": history.epoch_val_acc[history.best_epoch],
        },
    )
    history_path = args.history or out.with_suffix(".history.json")
    Path(history_path).write_text(json.dumps(history.to_json_dict(), indent=1))
    figure_path = args.figure or out.with_suffix(".training.png")
    figures.save_training_curves(history, figure_path)
    print(
        json.dumps(
            {
                "checkpoint": str(out),
                "history": str(history_path),
                "figure": str(figure_path),
                "epochs_run": len(history.epoch_val_acc),
                "best_epoch": history.best_epoch,
                "val_accuracy": history.epoch_val_acc[history.best_epoch],
            }
        )
    )
    return 0


def cmd_eval(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    model = load_model(args.model)
    report = evaluate(model, manifest, args.split, args.threshold)
    payload = report.to_json_dict(include_probabilities=not args.no_probabilities)
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=1))
        figure_path = args.figure or Path(args.out).with_suffix(".png")
    else:
        figure_path = args.figure
    if figure_path:
        figures.save_probability_histogram(report, figure_path)
        payload["figure"] = str(figure_path)
    print(json.dumps(payload))
    return 0


def cmd_features(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    model = load_model(args.model)
    path = export_features(model, manifest, args.split, args.out)
    print(json.dumps({"features": str(path), "fused_dim": model.config.fused_dim}))
    return 0


def cmd_bench(args) -> int:
    model = load_model(args.model)
    lengths = [int(v) for v in args.lengths.split(",")]
    report = bench_latency(model, lengths, args.reps, seed=args.seed)
    payload = report.to_json_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=1))
        figure_path = args.figure or Path(args.out).with_suffix(".png")
    else:
        figure_path = args.figure
    if figure_path:
        figures.save_latency_curve(report, figure_path)
        payload["figure"] = str(figure_path)
    print(json.dumps(payload))
    return 0


def cmd_detect(args) -> int:
    model = load_model(args.model)
    if args.listen:
        host, _, port = args.listen.rpartition(":")
        source = FrameSource.from_tcp(
            host or "127.0.0.1", int(port), args.idle_timeout
        )
    elif args.input and args.input != "-":
        source = FrameSource.from_file(args.input)
    else:
        source = FrameSource.from_stdin()
    try:
        for event in sliding_detect(
            source, model, args.window, args.hop, args.threshold
        ):
            print(event.to_json(), flush=True)
    finally:
        source.close()
    return 0


def cmd_ablate(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    hyper = _hyper_from_args(args)
    variants = args.variants.split(",") if args.variants else list("abcdefghij")
    rows = run_ablation(manifest, variants, hyper, args.threshold, log=_log)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "comparison.json").write_text(json.dumps(rows, indent=1))
    with open(out_dir / "comparison.csv", "w") as fh:
        cols = list(rows[0].keys())
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in cols) + "\n")
    figures.save_ablation_chart(rows, out_dir / "comparison.png")
    print(json.dumps({"out_dir": str(out_dir), "rows": rows}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cswsteg",
        description=(
            "Steganalysis toolkit for QIM-embedded speech codeword streams: "
            "synthesize datasets, embed, train, evaluate, and detect live."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="build a labeled dataset from a config JSON")
    p.add_argument("--config", required=True, help="dataset config JSON")
    p.add_argument("--out", help="override the config's out_dir")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("embed", help="embed random bits into a cover .cwst file")
    p.add_argument("--cover", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--seed", type=int, default=0, help="frame-selection seed")
    p.add_argument("--message-seed", type=int, default=0)
    p.add_argument("--codebook-seed", type=int, default=0)
    p.add_argument("--codebook-dim", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="train a detector on a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--arch", help="variant letter a..j, 'short-clip', or JSON path")
    p.add_argument("--out", required=True, help="checkpoint output path (.npz)")
    p.add_argument("--history", help="history JSON path")
    p.add_argument("--figure", help="training-curve PNG path")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--figure", help="probability-histogram PNG path")
    p.add_argument("--no-probabilities", action="store_true",
                   help="omit per-clip probabilities from the printed JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("features", help="export fused feature vectors to CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("bench", help="measure single-clip inference latency")
    p.add_argument("--model", required=True)
    p.add_argument("--lengths", default="10,100,1000",
                   help="comma-separated clip lengths in frames")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="latency JSON path")
    p.add_argument("--figure", help="latency PNG path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("detect", help="sliding-window detection over a stream")
    p.add_argument("--model", required=True)
    p.add_argument("--input", help=".cwst stream file, or '-' for stdin (default)")
    p.add_argument("--listen", help="HOST:PORT to accept one TCP stream")
    p.add_argument("--window", type=int, default=1000)
    p.add_argument("--hop", type=int, default=100)
    p.add_argument("--threshold", type=float)
    p.add_argument("--idle-timeout", type=float, default=30.0)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("ablate", help="train and compare architecture variants")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variants", help="comma-separated letters, default a..j")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CswstegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1


if __name__ == "__main__":
    sys.exit(main())
