"""Training loop, evaluation, experiment sweeps and inference benchmarks.

Training is plain mini-batch Adam over shuffled cover/stego pairs with
best-validation checkpointing, reproducible to the bit for a fixed seed.
A sweep trains one model per (sample length, embedding rate) grid cell on
freshly generated synthetic corpora and reports held-out test accuracy;
the benchmark times single-sample inference with BLAS pinned to one thread.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .model import (
    ModelConfig,
    ModelParams,
    batch_loss_and_grads,
    clip_probability,
    init_params,
    predict_batch,
)
from .qim import StegoConfig, make_stego_corpus
from .qis import (
    CodecShape,
    Corpus,
    EmptySample,
    ShapeMismatch,
    derive_seeds,
    generate_cover_corpus,
    sample_cover_model,
)

THREADS_ENV = "STEGATTN_THREADS"


class NonFiniteUpdate(FloatingPointError):
    """An optimizer step produced non-finite parameters."""


class DivergenceDetected(FloatingPointError):
    """Mean training loss left the finite float range."""


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("betas must lie in [0, 1)")
        if self.learning_rate <= 0.0 or self.eps <= 0.0:
            raise ValueError("learning rate and eps must be positive")


@dataclass(frozen=True)
class EarlyStopConfig:
    enabled: bool = True
    patience: int = 10

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be at least 1 epoch")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 100
    seed: int = 0
    adam: AdamConfig = field(default_factory=AdamConfig)
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch size and max epochs must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation fraction must lie in (0, 1)")


@dataclass(eq=False)
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam_state(params: ModelParams) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(a) for k, a in params.tree().items()},
        v={k: np.zeros_like(a) for k, a in params.tree().items()},
    )


def adam_step(params: ModelParams, grads, state: AdamState, config: AdamConfig) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    grad_tree = grads.tree()
    for name, theta in params.tree().items():
        g = grad_tree[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        theta -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        if not np.isfinite(theta).all():
            raise NonFiniteUpdate(f"parameter {name} is not finite after update")


@dataclass
class EpochStats:
    epoch: int  # 1-based
    train_loss: float
    val_loss: float
    val_accuracy: float
    n_clamped: int
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = 0.0
    stopped_early: bool = False

    @property
    def total_seconds(self) -> float:
        return sum(e.seconds for e in self.epochs)

    def to_csv(self) -> str:
        """Per-epoch curve without wall-clock columns, so the file is seed-stable."""
        lines = ["epoch,train_loss,val_loss,val_accuracy,clamped_logits"]
        for e in self.epochs:
            lines.append(
                f"{e.epoch},{float(e.train_loss)!r},{float(e.val_loss)!r},"
                f"{float(e.val_accuracy)!r},{e.n_clamped}"
            )
        return "\n".join(lines) + "\n"


def _stack_corpus(corpus: Corpus) -> np.ndarray:
    if not corpus.samples:
        raise EmptySample("corpus has no samples")
    return np.stack([s.indices for s in corpus.samples])


def _stack_pair(cover: Corpus, stego: Corpus):
    xc = _stack_corpus(cover)
    xs = _stack_corpus(stego)
    if xc.shape[1] != xs.shape[1]:
        raise ShapeMismatch(
            f"cover frames {xc.shape[1]} differ from stego frames {xs.shape[1]}"
        )
    x = np.concatenate([xc, xs])
    y = np.concatenate([np.zeros(len(xc)), np.ones(len(xs))])
    return x, y


def _mean_bce(probs: np.ndarray, labels: np.ndarray) -> float:
    p = clip_probability(probs)
    return float(np.mean(-(labels * np.log(p) + (1.0 - labels) * np.log1p(-p))))


def split_pair(cover: Corpus, stego: Corpus, seed: int,
               fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)):
    """Paired train/validation/test split of a cover/stego corpus pair.

    One permutation drives both classes, so a cover and the stego derived
    from it always land in the same split.
    """
    if len(cover) != len(stego):
        raise ShapeMismatch("cover and stego corpora must pair one to one")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    n = len(cover)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    if n - n_val - n_test < 1 or n_val < 1 or n_test < 1:
        raise ValueError(f"{n} samples per class cannot fill all three splits")
    perm = np.random.default_rng(seed).permutation(n)
    parts = (perm[n_val + n_test :], perm[:n_val], perm[n_val : n_val + n_test])

    def take(corpus: Corpus, idx) -> Corpus:
        return Corpus(corpus.codec_shape, [corpus.samples[i] for i in idx])

    return tuple((take(cover, idx), take(stego, idx)) for idx in parts)


def merge_corpora(a: Corpus, b: Corpus) -> Corpus:
    if a.codec_shape != b.codec_shape:
        raise ShapeMismatch("corpora use different codec shapes")
    return Corpus(a.codec_shape, a.samples + b.samples)


def train(
    model_config: ModelConfig,
    cover_corpus: Corpus,
    stego_corpus: Corpus,
    config: TrainConfig = TrainConfig(),
    validation: tuple[Corpus, Corpus] | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Train on cover/stego pairs; returns best-validation parameters.

    When no validation pair is given, a paired fraction of the input is
    held out for checkpoint selection and early stopping. All randomness
    (init, shuffling, dropout, carve-out) derives from config.seed.
    """
    init_seed, shuffle_seed, dropout_seed, carve_seed = derive_seeds(config.seed, 4)
    if validation is None:
        n = min(len(cover_corpus), len(stego_corpus))
        if len(cover_corpus) != len(stego_corpus):
            raise ShapeMismatch("cover and stego corpora must pair one to one")
        n_val = max(1, int(round(config.validation_fraction * n)))
        if n_val >= n:
            raise ValueError("validation carve-out would consume the whole corpus")
        perm = np.random.default_rng(carve_seed).permutation(n)
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        shape = cover_corpus.codec_shape
        validation = (
            Corpus(shape, [cover_corpus.samples[i] for i in val_idx]),
            Corpus(shape, [stego_corpus.samples[i] for i in val_idx]),
        )
        cover_corpus = Corpus(shape, [cover_corpus.samples[i] for i in train_idx])
        stego_corpus = Corpus(shape, [stego_corpus.samples[i] for i in train_idx])

    x, y = _stack_pair(cover_corpus, stego_corpus)
    val_x, val_y = _stack_pair(*validation)
    if x.shape[1] != model_config.window_frames:
        raise ShapeMismatch(
            f"corpus frames {x.shape[1]} differ from model window "
            f"{model_config.window_frames}"
        )

    params = init_params(model_config, init_seed)
    state = init_adam_state(params)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)
    n_total = x.shape[0]

    history = TrainHistory()
    best_params = params.copy()
    best_acc = -1.0
    stall = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        perm = shuffle_rng.permutation(n_total)
        loss_sum = 0.0
        clamped = 0
        for lo in range(0, n_total, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            losses, grads, n_clamped = batch_loss_and_grads(
                x[idx], y[idx], params, model_config, rng=dropout_rng
            )
            clamped += n_clamped
            loss_sum += float(losses.sum())
            scale = 1.0 / idx.size
            for g in grads.tree().values():
                g *= scale
            adam_step(params, grads, state, config.adam)
        train_loss = loss_sum / n_total
        if not np.isfinite(train_loss):
            raise DivergenceDetected(f"train loss {train_loss} at epoch {epoch}")

        probs = predict_batch(val_x, params, model_config)
        val_loss = _mean_bce(probs, val_y)
        val_acc = float(np.mean((probs >= 0.5) == (val_y == 1.0)))
        history.epochs.append(EpochStats(
            epoch=epoch,
            train_loss=train_loss,
            val_loss=val_loss,
            val_accuracy=val_acc,
            n_clamped=clamped,
            seconds=time.perf_counter() - t0,
        ))
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = params.copy()
            history.best_epoch = epoch
            history.best_val_accuracy = val_acc
            stall = 0
        else:
            stall += 1
            if config.early_stop.enabled and stall >= config.early_stop.patience:
                history.stopped_early = True
                break
    return best_params, history


@dataclass
class EvalResult:
    n: int
    accuracy: float
    recall_cover: float
    recall_stego: float
    confusion: np.ndarray  # rows true label, columns predicted, cover first

    def render(self) -> str:
        c = self.confusion
        return (
            f"n={self.n} accuracy={self.accuracy:.4f} "
            f"recall_cover={self.recall_cover:.4f} recall_stego={self.recall_stego:.4f}\n"
            f"confusion [[tn fp] [fn tp]] = [[{c[0, 0]} {c[0, 1]}] [{c[1, 0]} {c[1, 1]}]]"
        )


def evaluate(params: ModelParams, model_config: ModelConfig, corpus: Corpus,
             dtype=np.float64) -> EvalResult:
    """Accuracy and confusion counts on a labeled corpus; ties classify as stego."""
    x = _stack_corpus(corpus)
    y = np.array([s.label for s in corpus.samples])
    probs = predict_batch(x, params, model_config, dtype=dtype)
    pred = probs >= 0.5
    confusion = np.zeros((2, 2), dtype=np.int64)
    for true in (0, 1):
        for hat in (0, 1):
            confusion[true, hat] = int(np.sum((y == true) & (pred == bool(hat))))
    correct = confusion[0, 0] + confusion[1, 1]
    n = int(y.size)
    per_class = []
    for true in (0, 1):
        row = confusion[true].sum()
        per_class.append(float(confusion[true, true] / row) if row else 0.0)
    return EvalResult(
        n=n,
        accuracy=float(correct / n),
        recall_cover=per_class[0],
        recall_stego=per_class[1],
        confusion=confusion,
    )


# --- experiment grid -----------------------------------------------------------


@dataclass(frozen=True)
class ExperimentGrid:
    """Cross product of sample lengths and embedding rates, plus corpus knobs."""

    lengths_ms: tuple[float, ...] = (100.0, 300.0, 500.0, 700.0, 1000.0)
    rates: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 1.0)
    n_per_class: int = 10000
    # Dirichlet concentration of the synthetic cover source. 0.1 gives peaked
    # transition rows, strong temporal structure, and detectable low-rate
    # embedding at desk-scale corpus sizes.
    concentration: float = 0.1
    frame_duration_ms: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "lengths_ms", tuple(float(v) for v in self.lengths_ms))
        object.__setattr__(self, "rates", tuple(float(v) for v in self.rates))
        if not self.lengths_ms or not self.rates:
            raise ValueError("grid needs at least one length and one rate")
        if self.n_per_class < 10:
            raise ValueError("need at least 10 samples per class")
        for r in self.rates:
            if not 0.0 < r <= 1.0:
                raise ValueError("rates must lie in (0, 1]")

    def frames(self, length_ms: float) -> int:
        frames = int(round(length_ms / self.frame_duration_ms))
        if frames < 1:
            raise ValueError(f"length {length_ms} ms is shorter than one frame")
        return frames

    def cells(self) -> list[tuple[float, float]]:
        return [(l, r) for l in self.lengths_ms for r in self.rates]


@dataclass
class CellResult:
    length_ms: float
    frames: int
    rate: float
    seed: int
    test_accuracy: float
    recall_cover: float
    recall_stego: float
    epochs_run: int
    best_epoch: int
    train_seconds: float


@dataclass
class ResultTable:
    root_seed: int
    cells: list[CellResult] = field(default_factory=list)

    def to_csv(self, timing: bool = False) -> str:
        """Per-cell accuracy CSV; `timing=True` appends the volatile wall-clock column."""
        header = "length_ms,rate,seed,test_accuracy"
        if timing:
            header += ",train_time_s"
        lines = [header]
        for c in self.cells:
            row = f"{float(c.length_ms)!r},{float(c.rate)!r},{c.seed},{float(c.test_accuracy)!r}"
            if timing:
                row += f",{float(c.train_seconds)!r}"
            lines.append(row)
        return "\n".join(lines) + "\n"

    def render(self) -> str:
        headers = ["length_ms", "frames", "rate", "seed", "test_acc",
                   "recall_cover", "recall_stego", "epochs", "best", "train_s"]
        rows = [
            [f"{c.length_ms:g}", str(c.frames), f"{c.rate:g}", str(c.seed),
             f"{c.test_accuracy:.4f}", f"{c.recall_cover:.4f}", f"{c.recall_stego:.4f}",
             str(c.epochs_run), str(c.best_epoch), f"{c.train_seconds:.1f}"]
            for c in self.cells
        ]
        widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
                  for i, h in enumerate(headers)]
        fmt = "  ".join(f"{{:>{w}}}" for w in widths)
        out = [fmt.format(*headers)]
        out += [fmt.format(*r) for r in rows]
        return "\n".join(out) + "\n"

    def rate_axis(self, length_ms: float) -> list[tuple[float, float]]:
        pts = [(c.rate, c.test_accuracy) for c in self.cells if c.length_ms == length_ms]
        return sorted(pts)

    def length_axis(self, rate: float) -> list[tuple[float, float]]:
        pts = [(c.length_ms, c.test_accuracy) for c in self.cells if c.rate == rate]
        return sorted(pts)


def trend_violations(points: list[tuple[float, float]], tolerance: float = 0.02):
    """Drops beyond tolerance between consecutive points of a rising axis.

    `points` are (position, accuracy) pairs sorted by position; each violation
    reports (previous position, position, accuracy drop).
    """
    out = []
    for (prev_pos, prev_acc), (pos, acc) in zip(points, points[1:]):
        if acc < prev_acc - tolerance:
            out.append((prev_pos, pos, float(prev_acc - acc)))
    return out


def build_cell_corpora(
    frames: int,
    rate: float,
    grid: ExperimentGrid,
    root_seed: int,
    shape: CodecShape | None = None,
):
    """Synthetic cover/stego pair for one grid cell.

    Cover data depends only on (root_seed, frames): cells along the rate axis
    share covers, so accuracy differences isolate the embedding rate.
    """
    if shape is None:
        shape = CodecShape(frame_duration_ms=grid.frame_duration_ms)
    model_seed, corpus_seed = derive_seeds((int(root_seed), int(frames)), 2)
    stego_seed = derive_seeds((int(root_seed), int(frames), _rate_key(rate)), 1)[0]
    cover_model = sample_cover_model(shape, grid.concentration, model_seed)
    covers = generate_cover_corpus(cover_model, grid.n_per_class, frames, corpus_seed)
    stego_config = StegoConfig(embedding_rate=rate)
    stegos = make_stego_corpus(covers, stego_config, stego_seed)
    return covers, stegos


def _rate_key(rate: float) -> int:
    return int(round(float(rate) * 10000))


def _cell_seeds(root_seed: int, frames: int):
    # split/train seeds shared across rates at fixed length: identical splits,
    # init and batch order make the rate axis a paired comparison
    _, _, split_seed, train_seed = derive_seeds((int(root_seed), int(frames)), 4)
    return split_seed, train_seed


def run_cell(
    length_ms: float,
    rate: float,
    grid: ExperimentGrid,
    root_seed: int,
    model_config: ModelConfig = ModelConfig(),
    train_config: TrainConfig = TrainConfig(),
    limit_threads: bool = False,
) -> CellResult:
    """Generate data, train and test one (length, rate) cell."""
    t0 = time.perf_counter()
    frames = grid.frames(length_ms)
    split_seed, train_seed = _cell_seeds(root_seed, frames)
    covers, stegos = build_cell_corpora(frames, rate, grid, root_seed)
    (tr, va, te) = split_pair(covers, stegos, split_seed)
    cell_model = replace(model_config, window_frames=frames)
    cell_train = replace(train_config, seed=train_seed)
    ctx = threadpool_limits(limits=1) if limit_threads else _null_context()
    with ctx:
        params, history = train(cell_model, tr[0], tr[1], cell_train, validation=va)
        result = evaluate(params, cell_model, merge_corpora(te[0], te[1]))
    return CellResult(
        length_ms=float(length_ms),
        frames=frames,
        rate=float(rate),
        seed=int(root_seed),
        test_accuracy=result.accuracy,
        recall_cover=result.recall_cover,
        recall_stego=result.recall_stego,
        epochs_run=len(history.epochs),
        best_epoch=history.best_epoch,
        train_seconds=time.perf_counter() - t0,
    )


class _null_context:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def resolve_workers(requested: int | None = None) -> int:
    """Worker count for sweep cells; the environment variable caps it (0 = auto)."""
    cap = None
    raw = os.environ.get(THREADS_ENV)
    if raw is not None and raw.strip() != "":
        cap = int(raw)
        if cap < 0:
            raise ValueError(f"{THREADS_ENV} must be >= 0")
        if cap == 0:
            cap = os.cpu_count() or 1
    want = requested if requested is not None else 1
    if want == 0:
        want = os.cpu_count() or 1
    return max(1, min(want, cap) if cap is not None else want)


def _run_cell_star(args) -> CellResult:
    return run_cell(*args[:-1], limit_threads=args[-1])


def run_sweep(
    grid: ExperimentGrid,
    root_seed: int,
    model_config: ModelConfig = ModelConfig(),
    train_config: TrainConfig = TrainConfig(),
    workers: int | None = None,
) -> ResultTable:
    """Train and test every grid cell; bit-reproducible for a fixed root seed.

    Cells are pure functions of (grid, root_seed), so worker count changes
    wall-clock only, never results.
    """
    n_workers = resolve_workers(workers)
    cells = grid.cells()
    args = [(l, r, grid, root_seed, model_config, train_config, n_workers > 1)
            for (l, r) in cells]
    if n_workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_run_cell_star, args))
    else:
        results = [_run_cell_star(a) for a in args]
    return ResultTable(root_seed=int(root_seed), cells=results)


# --- inference latency ----------------------------------------------------------


@dataclass
class LatencyStat:
    frames: int
    repetitions: int
    batch_size: int
    mean_us: float
    p50_us: float
    p99_us: float
    total_seconds: float
    dtype: str


def bench_inference(
    params: ModelParams,
    model_config: ModelConfig,
    corpus: Corpus,
    repetitions: int = 1000,
    warmup: int = 100,
    single_thread: bool = True,
    dtype=np.float64,
    batch_size: int = 1,
) -> LatencyStat:
    """Wall-clock per-sample inference time over `repetitions` timed calls.

    Cycles through the corpus; batch mode reports amortized per-sample time.
    Single-thread mode pins the BLAS pool for comparable numbers across
    machines.
    """
    if repetitions < 1 or warmup < 0 or batch_size < 1:
        raise ValueError("repetitions and batch size must be positive")
    x = _stack_corpus(corpus)
    if x.shape[1] != model_config.window_frames:
        raise ShapeMismatch(
            f"corpus frames {x.shape[1]} differ from model window "
            f"{model_config.window_frames}"
        )
    n = x.shape[0]
    starts = np.arange(repetitions + warmup) * batch_size % n
    ctx = threadpool_limits(limits=1) if single_thread else _null_context()
    durations = np.empty(repetitions)
    with ctx:
        for i in range(warmup):
            lo = int(starts[i])
            batch = np.take(x, range(lo, lo + batch_size), axis=0, mode="wrap")
            predict_batch(batch, params, model_config, dtype=dtype)
        t_all = time.perf_counter()
        for i in range(repetitions):
            lo = int(starts[warmup + i])
            batch = np.take(x, range(lo, lo + batch_size), axis=0, mode="wrap")
            t0 = time.perf_counter_ns()
            predict_batch(batch, params, model_config, dtype=dtype)
            durations[i] = (time.perf_counter_ns() - t0) / batch_size
        total = time.perf_counter() - t_all
    us = durations / 1000.0
    return LatencyStat(
        frames=model_config.window_frames,
        repetitions=repetitions,
        batch_size=batch_size,
        mean_us=float(us.mean()),
        p50_us=float(np.percentile(us, 50)),
        p99_us=float(np.percentile(us, 99)),
        total_seconds=total,
        dtype=np.dtype(dtype).name,
    )


def latency_csv(stats: list[LatencyStat]) -> str:
    lines = ["frames,mean_us,p50_us,p99_us"]
    for s in stats:
        lines.append(f"{s.frames},{s.mean_us:.3f},{s.p50_us:.3f},{s.p99_us:.3f}")
    return "\n".join(lines) + "\n"


def make_bench_corpus(frames: int, n_samples: int, seed: int,
                      shape: CodecShape | None = None,
                      concentration: float = 0.1) -> Corpus:
    """Small synthetic cover corpus for timing runs."""
    if shape is None:
        shape = CodecShape()
    model_seed, corpus_seed = derive_seeds((int(seed), int(frames)), 2)
    model = sample_cover_model(shape, concentration, model_seed)
    return generate_cover_corpus(model, n_samples, frames, corpus_seed)
