"""Command-line pipelines: data generation, embedding, training, detection,
sweeps and benchmarks.

Every command that writes files also writes a JSON manifest with the resolved
flags, the root seed and SHA-256 hashes of its deterministic outputs, so a
run can be reproduced and verified byte for byte. Wall-clock artifacts are
listed in the manifest as volatile and never hashed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .gradcheck import grad_check_many
from .model import ModelConfig, init_params, load_checkpoint, predict_batch, save_checkpoint
from .qim import StegoConfig, default_codebooks, make_stego_corpus, read_sidecar, write_sidecar
from .qis import (
    CodecShape,
    FormatError,
    QisError,
    derive_seeds,
    generate_cover_corpus,
    read_corpus,
    sample_cover_model,
    slide_windows,
    write_corpus,
)
from .training import (
    AdamConfig,
    EarlyStopConfig,
    ExperimentGrid,
    TrainConfig,
    _rate_key,
    bench_inference,
    latency_csv,
    make_bench_corpus,
    run_sweep,
    train,
    trend_violations,
)

COVER_FILE = "cover.qisc"
STEGO_FILE = "stego.qisc"
SIDECAR_FILE = "codec.qimp"
MANIFEST_FILE = "manifest.json"
RESULTS_FILE = "results.csv"
TIMING_FILE = "timing.csv"
TABLE_FILE = "results.txt"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return list(value)
    return value


def write_manifest(path: Path, command: str, args: argparse.Namespace, root_seed: int,
                   artifacts: list[Path], volatile: list[Path] = ()) -> None:
    """Record flags, seed and output hashes; volatile files are named, not hashed."""
    flags = {
        k: _jsonable(v)
        for k, v in sorted(vars(args).items())
        if k not in ("func", "command")
    }
    manifest = {
        "command": command,
        "flags": flags,
        "root_seed": int(root_seed),
        "tool_version": __version__,
        "artifacts": {p.name: _sha256(p) for p in artifacts},
        "volatile": sorted(p.name for p in volatile),
    }
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="ascii")


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _read_stream(path: Path) -> np.ndarray:
    """Raw index stream: one frame per line, three integers, QISC1 body grammar."""
    lines = path.read_text(encoding="ascii").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    rows = []
    for i, ln in enumerate(lines, start=1):
        parts = ln.split()
        try:
            vals = [int(v) for v in parts]
        except ValueError as e:
            raise FormatError(f"bad index row {ln!r}", line=i) from e
        if len(vals) != 3:
            raise FormatError(f"expected 3 indices, got {len(vals)}", line=i)
        rows.append(vals)
    if not rows:
        raise FormatError("stream file is empty", line=1, offset=0)
    return np.asarray(rows, dtype=np.int64)


def _model_config(args, frames: int, codebook_sizes: tuple[int, ...]) -> ModelConfig:
    return ModelConfig(
        window_frames=frames,
        embedding_size=args.embedding_size,
        heads=args.heads,
        head_dim=args.head_dim,
        dropout_rate=args.dropout,
        codebook_sizes=codebook_sizes,
        scaled_attention=args.scaled,
        use_positional_encoding=not args.no_pe,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        seed=args.seed,
        adam=AdamConfig(learning_rate=args.lr),
        early_stop=EarlyStopConfig(enabled=not args.no_early_stop, patience=args.patience),
        validation_fraction=args.val_fraction,
    )


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--embedding-size", type=int, default=100)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--head-dim", type=int, default=32)
    p.add_argument("--dropout", type=float, default=0.6)
    p.add_argument("--scaled", action="store_true",
                   help="scale attention logits by 1/sqrt(head_dim)")
    p.add_argument("--no-pe", action="store_true", help="disable positional encoding")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--no-early-stop", action="store_true")
    p.add_argument("--val-fraction", type=float, default=0.1)


def cmd_gen_data(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shape = CodecShape()
    model_seed, corpus_seed = derive_seeds((args.seed, args.frames), 2)
    stego_seed = derive_seeds((args.seed, args.frames, _rate_key(args.rate)), 1)[0]
    cover_model = sample_cover_model(shape, args.concentration, model_seed)
    covers = generate_cover_corpus(cover_model, args.n, args.frames, corpus_seed)
    config = StegoConfig(embedding_rate=args.rate, bit_seed=args.bit_seed)
    codebooks, partitions = default_codebooks(shape, seed=config.bit_seed)
    stegos = make_stego_corpus(covers, config, stego_seed, codebooks, partitions)

    cover_path = out_dir / COVER_FILE
    stego_path = out_dir / STEGO_FILE
    sidecar_path = out_dir / SIDECAR_FILE
    write_corpus(covers, cover_path)
    write_corpus(stegos, stego_path)
    write_sidecar(codebooks, partitions, sidecar_path)
    write_manifest(out_dir / MANIFEST_FILE, "gen-data", args, args.seed,
                   [cover_path, stego_path, sidecar_path])
    print(f"wrote {len(covers)} covers and {len(stegos)} stego samples to {out_dir}")
    return 0


def cmd_embed(args) -> int:
    covers = read_corpus(args.cover)
    config = StegoConfig(embedding_rate=args.rate, bit_seed=args.bit_seed)
    if args.sidecar:
        codebooks, partitions = read_sidecar(args.sidecar)
    else:
        codebooks, partitions = default_codebooks(covers.codec_shape, seed=config.bit_seed)
    stegos = make_stego_corpus(covers, config, args.seed, codebooks, partitions)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(stegos, out)
    artifacts = [out]
    if args.sidecar_out:
        sidecar_out = Path(args.sidecar_out)
        write_sidecar(codebooks, partitions, sidecar_out)
        artifacts.append(sidecar_out)
    write_manifest(out.with_name(out.name + ".manifest.json"), "embed", args,
                   args.seed, artifacts)
    print(f"embedded payload at rate {args.rate} into {len(stegos)} samples -> {out}")
    return 0


def cmd_train(args) -> int:
    covers = read_corpus(args.cover)
    stegos = read_corpus(args.stego)
    model_config = _model_config(args, args.frames, covers.codec_shape.codebook_sizes)
    train_config = _train_config(args)
    params, history = train(model_config, covers, stegos, train_config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, model_config, out)
    history_path = Path(args.history) if args.history else out.with_name(out.name + ".history.csv")
    history_path.write_text(history.to_csv(), encoding="ascii")
    write_manifest(out.with_name(out.name + ".manifest.json"), "train", args,
                   args.seed, [out, history_path])
    print(
        f"epochs={len(history.epochs)} best_epoch={history.best_epoch} "
        f"best_val_accuracy={history.best_val_accuracy:.4f}"
        + (" (stopped early)" if history.stopped_early else "")
    )
    return 0


def cmd_detect(args) -> int:
    params, config = load_checkpoint(args.checkpoint)
    window = args.window if args.window is not None else config.window_frames
    if window != config.window_frames:
        raise FormatError(
            f"window {window} does not match checkpoint window {config.window_frames}"
        )
    stride = args.stride if args.stride is not None else window
    shape = CodecShape(codebook_sizes=config.codebook_sizes)
    stream = _read_stream(Path(args.stream))
    windows = slide_windows(stream, window, stride, shape)
    x = np.stack([w.indices for w in windows])
    probs = predict_batch(x, params, config)
    for i, p in enumerate(probs):
        verdict = "stego" if p >= 0.5 else "cover"
        print(f"{i * stride} {float(p)!r} {verdict}")
    return 0


def cmd_sweep(args) -> int:
    grid = ExperimentGrid(
        lengths_ms=args.lengths_ms,
        rates=args.rates,
        n_per_class=args.n_per_class,
        concentration=args.concentration,
    )
    model_config = _model_config(args, ModelConfig().window_frames, CodecShape().codebook_sizes)
    table = run_sweep(grid, args.seed, model_config=model_config,
                      train_config=_train_config(args), workers=args.workers)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / RESULTS_FILE
    timing_path = out_dir / TIMING_FILE
    table_path = out_dir / TABLE_FILE
    results_path.write_text(table.to_csv(), encoding="ascii")
    timing_path.write_text(table.to_csv(timing=True), encoding="ascii")
    table_path.write_text(table.render(), encoding="ascii")
    write_manifest(out_dir / MANIFEST_FILE, "sweep", args, args.seed,
                   [results_path, table_path], volatile=[timing_path])
    print(table.render(), end="")

    if args.assert_trend:
        failures = []
        for length in grid.lengths_ms:
            for prev_pos, pos, drop in trend_violations(table.rate_axis(length),
                                                        args.trend_tolerance):
                failures.append(
                    f"rate axis at {length:g} ms: accuracy drops {drop:.4f} "
                    f"from rate {prev_pos:g} to {pos:g}"
                )
        for rate in grid.rates:
            for prev_pos, pos, drop in trend_violations(table.length_axis(rate),
                                                        args.trend_tolerance):
                failures.append(
                    f"length axis at rate {rate:g}: accuracy drops {drop:.4f} "
                    f"from {prev_pos:g} ms to {pos:g} ms"
                )
        if failures:
            for f in failures:
                print(f"trend violation: {f}", file=sys.stderr)
            return 1
        print("trend assertion passed")
    return 0


def cmd_bench(args) -> int:
    stats = []
    for frames in args.frames:
        if args.checkpoint:
            params, config = load_checkpoint(args.checkpoint)
            if config.window_frames != frames:
                raise FormatError(
                    f"checkpoint window {config.window_frames} cannot time {frames} frames"
                )
        else:
            config = ModelConfig(window_frames=frames)
            params = init_params(config, derive_seeds((args.seed, frames), 1)[0])
        corpus = make_bench_corpus(frames, args.n, args.seed)
        stats.append(bench_inference(
            params, config, corpus,
            repetitions=args.reps,
            warmup=args.warmup,
            single_thread=not args.multi_thread,
            dtype=np.float32 if args.float32 else np.float64,
            batch_size=args.batch_size,
        ))
    csv_text = latency_csv(stats)
    print(csv_text, end="")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(csv_text, encoding="ascii")
        write_manifest(out.with_name(out.name + ".manifest.json"), "bench", args,
                       args.seed, [], volatile=[out])
    return 0


def cmd_grad_check(args) -> int:
    reports = grad_check_many(
        n_seeds=args.seeds,
        epsilon=args.epsilon,
        tolerance=args.tolerance,
        start_seed=args.seed,
    )
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"seed {r.seed}: max_rel_err={r.max_error:.3e} {status}")
    n_failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - n_failed}/{len(reports)} seeds passed")
    return 1 if n_failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stegattn",
        description="Attention-based steganalysis of QIM-embedded index streams",
    )
    parser.add_argument("--version", action="version", version=f"stegattn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate paired synthetic cover/stego corpora")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--concentration", type=float, default=0.1)
    p.add_argument("--bit-seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("embed", help="embed random payloads into an existing cover corpus")
    p.add_argument("--cover", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bit-seed", type=int, default=0)
    p.add_argument("--sidecar", help="read codebooks/partitions from this sidecar")
    p.add_argument("--sidecar-out", help="write the codebooks/partitions used")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="train a detector on cover/stego corpora")
    p.add_argument("--cover", required=True)
    p.add_argument("--stego", required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="epoch curve CSV (default <out>.history.csv)")
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="classify sliding windows of a raw index stream")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stream", required=True)
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("sweep", help="accuracy grid over sample lengths and rates")
    p.add_argument("--lengths-ms", type=_parse_floats, default=(100.0, 300.0, 500.0, 700.0, 1000.0))
    p.add_argument("--rates", type=_parse_floats, default=(0.1, 0.2, 0.3, 0.4, 0.5, 1.0))
    p.add_argument("--n-per-class", type=int, default=10000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--concentration", type=float, default=0.1)
    p.add_argument("--workers", type=int, help="sweep cell processes (default 1, env-capped)")
    p.add_argument("--assert-trend", action="store_true",
                   help="exit nonzero when accuracy drops along a rising axis")
    p.add_argument("--trend-tolerance", type=float, default=0.02)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="single-sample inference latency per length")
    p.add_argument("--frames", type=_parse_ints, default=(10, 100))
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--float32", action="store_true", help="time single precision inference")
    p.add_argument("--multi-thread", action="store_true", help="do not pin BLAS threads")
    p.add_argument("--checkpoint", help="time this checkpoint instead of fresh parameters")
    p.add_argument("--out", help="write the latency CSV here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("grad-check", help="finite-difference check of the hand gradients")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (QisError, FloatingPointError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
