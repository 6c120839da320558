"""Quantization-index-sequence (QIS) data model and synthetic cover pipeline.

A QIS sample is a T x 3 integer matrix: one frame per row, three vector
quantizer indices per frame. This module owns the sample/corpus types,
range validation, a Markov-chain cover generator (a synthetic stand-in for
real codec statistics), sliding-window segmentation of long streams, and
the QISC1 text corpus format.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COVER = 0
STEGO = 1

DEFAULT_CODEBOOK_SIZES = (128, 32, 32)
DEFAULT_FRAME_DURATION_MS = 10.0

CORPUS_MAGIC = "QISC1"


class QisError(Exception):
    """Base class for QIS data errors."""


class IndexOutOfRange(QisError):
    def __init__(self, frame: int, position: int, value: int, size: int):
        super().__init__(
            f"index {value} at frame {frame}, position {position} is outside "
            f"codebook range [0, {size})"
        )
        self.frame = frame
        self.position = position
        self.value = value
        self.size = size


class EmptySample(QisError):
    pass


class StreamTooShort(QisError):
    pass


class ShapeMismatch(QisError):
    pass


class FormatError(QisError):
    """Corpus/checkpoint/sidecar file does not match its declared grammar."""

    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", offset {offset}" if offset is not None else "") + ")"
        super().__init__(message + where)
        self.line = line
        self.offset = offset


@dataclass(frozen=True)
class CodecShape:
    """Codeword layout of one frame: three positions with per-position codebook sizes."""

    codebook_sizes: tuple[int, ...] = DEFAULT_CODEBOOK_SIZES
    frame_duration_ms: float = DEFAULT_FRAME_DURATION_MS

    def __post_init__(self):
        object.__setattr__(self, "codebook_sizes", tuple(int(s) for s in self.codebook_sizes))
        object.__setattr__(self, "frame_duration_ms", float(self.frame_duration_ms))
        if len(self.codebook_sizes) != 3:
            raise ValueError("a frame carries exactly 3 codewords")
        if any(s < 2 for s in self.codebook_sizes):
            raise ValueError("every codebook needs at least 2 entries")
        if not self.frame_duration_ms > 0:
            raise ValueError("frame duration must be positive")

    @property
    def positions(self) -> int:
        return 3

    @property
    def vocab_size(self) -> int:
        return sum(self.codebook_sizes)

    @property
    def offsets(self) -> tuple[int, ...]:
        """Start of each position's index range in a shared 0..vocab_size space."""
        s = self.codebook_sizes
        return (0, s[0], s[0] + s[1])

    def duration_ms(self, frames: int) -> float:
        return frames * self.frame_duration_ms


@dataclass(frozen=True)
class SampleMeta:
    seed: int = 0
    embedding_rate: float = 0.0
    duration_ms: float = 0.0


@dataclass(eq=False)
class QisSample:
    indices: np.ndarray  # (T, 3) int64
    label: int = COVER
    meta: SampleMeta = field(default_factory=SampleMeta)

    @property
    def frames(self) -> int:
        return self.indices.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, QisSample):
            return NotImplemented
        return (
            self.label == other.label
            and self.meta == other.meta
            and np.array_equal(self.indices, other.indices)
        )


@dataclass(eq=False)
class Corpus:
    codec_shape: CodecShape
    samples: list[QisSample]

    @property
    def frames(self) -> int:
        if not self.samples:
            raise EmptySample("corpus has no samples")
        return self.samples[0].frames

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return self.codec_shape == other.codec_shape and self.samples == other.samples

    def validate(self) -> None:
        """Check the shared-frame-count invariant and per-sample index ranges."""
        if not self.samples:
            raise EmptySample("corpus has no samples")
        frames = self.samples[0].frames
        for i, s in enumerate(self.samples):
            if s.frames != frames:
                raise ShapeMismatch(
                    f"sample {i} has {s.frames} frames, corpus uses {frames}"
                )
            validate_sample(s.indices, self.codec_shape, label=s.label)


def validate_sample(
    indices,
    shape: CodecShape,
    label: int = COVER,
    seed: int = 0,
    embedding_rate: float = 0.0,
) -> QisSample:
    """Bounds-check a T x 3 index matrix and wrap it as a QisSample.

    Raises EmptySample for T == 0 and IndexOutOfRange at the first
    (row-major) entry outside its position's codebook range.
    """
    arr = np.asarray(indices)
    if arr.dtype == object:
        raise ValueError("index matrix must be rectangular")
    if arr.ndim != 2 or arr.shape[1] != shape.positions:
        raise ValueError(f"expected a T x {shape.positions} matrix, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise EmptySample("sample has no frames")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.floor(arr)):
            raise ValueError("indices must be integers")
    arr = arr.astype(np.int64, copy=True)
    sizes = np.asarray(shape.codebook_sizes)
    bad = (arr < 0) | (arr >= sizes[None, :])
    if bad.any():
        t, p = np.argwhere(bad)[0]
        raise IndexOutOfRange(int(t), int(p), int(arr[t, p]), int(sizes[p]))
    meta = SampleMeta(
        seed=int(seed),
        embedding_rate=float(embedding_rate),
        duration_ms=shape.duration_ms(arr.shape[0]),
    )
    return QisSample(indices=arr, label=int(label), meta=meta)


@dataclass(eq=False)
class CoverModel:
    """Per-position first-order Markov chains over codebook indices.

    The simplest synthetic source with temporal correlation for the attention
    layer to exploit; positions evolve independently.
    """

    shape: CodecShape
    transitions: list[np.ndarray]  # one (K, K) row-stochastic matrix per position
    initials: list[np.ndarray]  # one (K,) probability vector per position
    seed: int
    _cums: list[tuple[np.ndarray, np.ndarray]] | None = field(default=None, repr=False)

    def validate(self) -> None:
        for p, (tm, init) in enumerate(zip(self.transitions, self.initials)):
            k = self.shape.codebook_sizes[p]
            if tm.shape != (k, k) or init.shape != (k,):
                raise ShapeMismatch(f"position {p}: matrix shapes do not match codebook size {k}")
            if (tm < 0).any() or (init < 0).any():
                raise ValueError(f"position {p}: negative probabilities")
            if np.abs(tm.sum(axis=1) - 1.0).max() > 1e-9 or abs(init.sum() - 1.0) > 1e-9:
                raise ValueError(f"position {p}: probabilities do not sum to 1")

    def _cumulative(self) -> list[tuple[np.ndarray, np.ndarray]]:
        # cached cumulative distributions for inverse-CDF sampling
        if self._cums is None:
            self._cums = [
                (np.cumsum(init), np.cumsum(tm, axis=1))
                for init, tm in zip(self.initials, self.transitions)
            ]
        return self._cums


def sample_cover_model(shape: CodecShape, concentration: float, seed: int) -> CoverModel:
    """Draw a random cover model: Dirichlet rows with the given concentration.

    Small concentrations give peaked (strongly correlated) transitions; very
    large ones approach uniform rows.
    """
    if not concentration > 0:
        raise ValueError("concentration must be positive")
    rng = np.random.default_rng(seed)
    transitions = []
    initials = []
    for k in shape.codebook_sizes:
        alpha = np.full(k, float(concentration))
        initials.append(rng.dirichlet(alpha))
        transitions.append(rng.dirichlet(alpha, size=k))
    model = CoverModel(shape=shape, transitions=transitions, initials=initials, seed=int(seed))
    model.validate()
    return model


def generate_cover(model: CoverModel, frames: int, seed: int) -> QisSample:
    """Sample one cover: each position walks its Markov chain for `frames` steps.

    Pure function of (model, frames, seed).
    """
    if frames < 1:
        raise EmptySample("need at least one frame")
    rng = np.random.default_rng(seed)
    cols = []
    for p in range(model.shape.positions):
        cum_init, cum_trans = model._cumulative()[p]
        k = model.shape.codebook_sizes[p]
        u = rng.random(frames)
        states = np.empty(frames, dtype=np.int64)
        s = min(int(np.searchsorted(cum_init, u[0], side="right")), k - 1)
        states[0] = s
        for t in range(1, frames):
            s = min(int(np.searchsorted(cum_trans[s], u[t], side="right")), k - 1)
            states[t] = s
        cols.append(states)
    indices = np.stack(cols, axis=1)
    meta = SampleMeta(seed=int(seed), embedding_rate=0.0,
                      duration_ms=model.shape.duration_ms(frames))
    return QisSample(indices=indices, label=COVER, meta=meta)


def derive_seeds(root_seed, n: int) -> list[int]:
    """Split a root seed into n independent per-item seeds (order-stable)."""
    state = np.random.SeedSequence(root_seed).generate_state(n, dtype=np.uint64)
    return [int(s) for s in state]


def generate_cover_corpus(model: CoverModel, n_samples: int, frames: int, seed: int) -> Corpus:
    """Generate n_samples covers with per-sample seeds derived from `seed`."""
    seeds = derive_seeds(seed, n_samples)
    samples = [generate_cover(model, frames, s) for s in seeds]
    return Corpus(codec_shape=model.shape, samples=samples)


def slide_windows(
    stream,
    window_frames: int,
    stride_frames: int,
    shape: CodecShape = CodecShape(),
) -> list[QisSample]:
    """Cut an N x 3 index stream into fixed-length windows (no padding).

    Returns floor((N - window) / stride) + 1 contiguous windows; raises
    StreamTooShort when the stream is shorter than one window.
    """
    if window_frames < 1 or stride_frames < 1:
        raise ValueError("window and stride must be at least 1 frame")
    arr = np.asarray(stream)
    if arr.ndim != 2 or arr.shape[1] != shape.positions:
        raise ValueError(f"expected an N x {shape.positions} stream, got shape {arr.shape}")
    n = arr.shape[0]
    if n < window_frames:
        raise StreamTooShort(f"stream has {n} frames, window needs {window_frames}")
    validate_sample(arr, shape)  # one pass over the whole stream
    count = (n - window_frames) // stride_frames + 1
    out = []
    for i in range(count):
        start = i * stride_frames
        chunk = arr[start : start + window_frames].astype(np.int64, copy=True)
        meta = SampleMeta(duration_ms=shape.duration_ms(window_frames))
        out.append(QisSample(indices=chunk, label=COVER, meta=meta))
    return out


# --- QISC1 corpus file format -------------------------------------------------
#
# Text, line oriented:
#   QISC1
#   codebook_sizes 128 32 32
#   frame_duration_ms 10.0
#   frames 30
#   samples 2
#   sample label=0 seed=42 rate=0.0
#   <frames> lines of "i j k"
#   sample label=1 seed=43 rate=0.2
#   ...
#
# Floats are written with repr() so a read/write round trip is bit exact.


def _fmt_float(x: float) -> str:
    return repr(float(x))


def write_corpus(corpus: Corpus, destination) -> None:
    corpus.validate()
    shape = corpus.codec_shape
    frames = corpus.frames
    lines = [
        CORPUS_MAGIC,
        "codebook_sizes " + " ".join(str(s) for s in shape.codebook_sizes),
        "frame_duration_ms " + _fmt_float(shape.frame_duration_ms),
        f"frames {frames}",
        f"samples {len(corpus.samples)}",
    ]
    for s in corpus.samples:
        lines.append(
            f"sample label={int(s.label)} seed={int(s.meta.seed)} "
            f"rate={_fmt_float(s.meta.embedding_rate)}"
        )
        for row in s.indices:
            lines.append(f"{row[0]} {row[1]} {row[2]}")
    text = "\n".join(lines) + "\n"
    if hasattr(destination, "write"):
        destination.write(text)
    else:
        Path(destination).write_text(text, encoding="ascii")


class _LineReader:
    """Sequential line access with 1-based line numbers and byte offsets."""

    def __init__(self, text: str):
        self.lines = text.split("\n")
        if self.lines and self.lines[-1] == "":
            self.lines.pop()
        self.pos = 0
        self.offsets = []
        off = 0
        for ln in self.lines:
            self.offsets.append(off)
            off += len(ln.encode("utf-8")) + 1

    @property
    def line_no(self) -> int:
        return self.pos + 1

    @property
    def offset(self) -> int:
        if self.pos < len(self.offsets):
            return self.offsets[self.pos]
        return self.offsets[-1] + len(self.lines[-1].encode("utf-8")) + 1 if self.lines else 0

    def next(self, what: str) -> str:
        if self.pos >= len(self.lines):
            raise FormatError(f"unexpected end of file, expected {what}",
                              line=self.line_no, offset=self.offset)
        ln = self.lines[self.pos]
        self.pos += 1
        return ln


def _parse_kv(line: str, key: str, reader: _LineReader) -> str:
    prefix = key + " "
    if not line.startswith(prefix):
        raise FormatError(f"expected '{key} ...', got {line!r}",
                          line=reader.line_no - 1, offset=reader.offsets[reader.pos - 1])
    return line[len(prefix):]


def read_corpus(source) -> Corpus:
    if hasattr(source, "read"):
        text = source.read()
    else:
        text = Path(source).read_text(encoding="ascii")
    r = _LineReader(text)
    magic = r.next("magic")
    if magic != CORPUS_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CORPUS_MAGIC!r}", line=1, offset=0)
    try:
        sizes = tuple(int(x) for x in _parse_kv(r.next("codebook_sizes"), "codebook_sizes", r).split())
        duration = float(_parse_kv(r.next("frame_duration_ms"), "frame_duration_ms", r))
        frames = int(_parse_kv(r.next("frames"), "frames", r))
        n_samples = int(_parse_kv(r.next("samples"), "samples", r))
        shape = CodecShape(codebook_sizes=sizes, frame_duration_ms=duration)
    except (ValueError, IndexError) as e:
        raise FormatError(f"bad header: {e}", line=r.line_no - 1) from e
    samples = []
    for _ in range(n_samples):
        head_line_no = r.line_no
        head = r.next("sample header")
        parts = head.split()
        if len(parts) != 4 or parts[0] != "sample":
            raise FormatError(f"expected sample header, got {head!r}",
                              line=head_line_no, offset=r.offsets[head_line_no - 1])
        try:
            fields = dict(p.split("=", 1) for p in parts[1:])
            label = int(fields["label"])
            seed = int(fields["seed"])
            rate = float(fields["rate"])
        except (ValueError, KeyError) as e:
            raise FormatError(f"bad sample header {head!r}: {e}", line=head_line_no) from e
        rows = np.empty((frames, 3), dtype=np.int64)
        for t in range(frames):
            row_no = r.line_no
            row = r.next("index row")
            try:
                vals = [int(x) for x in row.split()]
            except ValueError as e:
                raise FormatError(f"bad index row {row!r}", line=row_no) from e
            if len(vals) != 3:
                raise FormatError(f"expected 3 indices, got {len(vals)}", line=row_no)
            rows[t] = vals
        try:
            sample = validate_sample(rows, shape, label=label, seed=seed, embedding_rate=rate)
        except QisError as e:
            raise FormatError(f"invalid sample ending at line {r.line_no - 1}: {e}",
                              line=head_line_no) from e
        samples.append(sample)
    if r.pos != len(r.lines):
        raise FormatError("trailing content after declared samples",
                          line=r.line_no, offset=r.offset)
    return Corpus(codec_shape=shape, samples=samples)
