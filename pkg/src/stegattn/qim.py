"""QIM steganography over vector-quantizer index streams.

Each codebook is split into two balanced halves by a random binary partition.
Embedding a bit at a slot replaces the logged index with the nearest codebook
vector (Euclidean distance, ties to the lowest index) whose partition label
equals the bit; extraction reads the label of the logged index back. Covers
and codebooks here are synthetic, so detection experiments are self-contained.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .qis import (
    COVER,
    STEGO,
    CodecShape,
    Corpus,
    FormatError,
    QisError,
    QisSample,
    SampleMeta,
    ShapeMismatch,
    derive_seeds,
)

DEFAULT_VECTOR_DIMS = (10, 5, 5)

SIDECAR_MAGIC = "QIMP1"


class BitExhaustion(QisError):
    """More payload slots selected than bits supplied."""


@dataclass(eq=False)
class Codebook:
    position: int
    vectors: np.ndarray  # (size, dim) float64
    seed: int

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Codebook):
            return NotImplemented
        return (
            self.position == other.position
            and self.seed == other.seed
            and np.array_equal(self.vectors, other.vectors)
        )


@dataclass(eq=False)
class Partition:
    labels: np.ndarray  # (size,) uint8, values in {0, 1}
    seed: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, Partition):
            return NotImplemented
        return self.seed == other.seed and np.array_equal(self.labels, other.labels)

    def validate(self) -> None:
        if self.labels.ndim != 1 or not np.isin(self.labels, (0, 1)).all():
            raise ValueError("partition labels must be a flat 0/1 vector")
        n1 = int(self.labels.sum())
        n0 = self.labels.size - n1
        if abs(n0 - n1) > 1:
            raise ValueError(f"partition is unbalanced: {n0} zeros vs {n1} ones")


@dataclass(frozen=True)
class StegoConfig:
    """Embedding policy: payload rate, which positions carry bits, selection unit."""

    embedding_rate: float = 1.0
    bit_seed: int = 0
    positions_used: tuple[int, ...] = (0, 1, 2)
    frame_level: bool = True  # select whole frames; False selects single slots

    def __post_init__(self):
        if not 0.0 <= self.embedding_rate <= 1.0:
            raise ValueError("embedding rate must lie in [0, 1]")
        if not self.positions_used:
            raise ValueError("at least one position must carry payload")
        if any(p not in (0, 1, 2) for p in self.positions_used):
            raise ValueError("positions are 0, 1, 2")
        if len(set(self.positions_used)) != len(self.positions_used):
            raise ValueError("positions_used has duplicates")
        object.__setattr__(self, "positions_used", tuple(sorted(self.positions_used)))


def synth_codebook(position: int, size: int, dim: int, seed: int) -> Codebook:
    """Random codebook with rows drawn uniformly from [0, 1)^dim.

    Duplicate rows are redrawn so nearest-vector lookups are unambiguous up to
    the lowest-index tie rule.
    """
    rng = np.random.default_rng(seed)
    vectors = rng.random((size, dim))
    while True:
        _, first = np.unique(vectors, axis=0, return_index=True)
        if first.size == vectors.shape[0]:
            break
        dup = np.setdiff1d(np.arange(size), first)
        vectors[dup] = rng.random((dup.size, dim))
    return Codebook(position=int(position), vectors=vectors, seed=int(seed))


def build_partition(size: int, seed: int) -> Partition:
    """Random balanced binary split of a codebook (sizes differ by at most 1)."""
    if size < 2:
        raise ValueError("cannot partition fewer than 2 codewords")
    ones = size // 2
    base = np.concatenate([
        np.zeros(size - ones, dtype=np.uint8),
        np.ones(ones, dtype=np.uint8),
    ])
    rng = np.random.default_rng(seed)
    labels = base[rng.permutation(size)]
    part = Partition(labels=labels, seed=int(seed))
    part.validate()
    return part


def default_codebooks(shape: CodecShape = CodecShape(), seed: int = 0):
    """One synthetic codebook and partition per position, seeds split from `seed`."""
    seeds = derive_seeds((int(seed), 0x51AB), 2 * shape.positions)
    codebooks = [
        synth_codebook(p, shape.codebook_sizes[p], DEFAULT_VECTOR_DIMS[p], seeds[p])
        for p in range(shape.positions)
    ]
    partitions = [
        build_partition(shape.codebook_sizes[p], seeds[shape.positions + p])
        for p in range(shape.positions)
    ]
    return codebooks, partitions


def requant_maps(codebooks: list[Codebook], partitions: list[Partition]) -> list[np.ndarray]:
    """Precompute index -> replacement-index tables, one (2, size) array per position.

    maps[p][b, i] is the nearest codeword to vector i among those labeled b.
    Distances use squared Euclidean; ties resolve to the lowest index
    (argmin over candidates in ascending index order).
    """
    maps = []
    for cb, part in zip(codebooks, partitions):
        if cb.size != part.labels.size:
            raise ShapeMismatch(
                f"position {cb.position}: codebook size {cb.size} vs "
                f"partition size {part.labels.size}"
            )
        diff = cb.vectors[:, None, :] - cb.vectors[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        table = np.empty((2, cb.size), dtype=np.int64)
        for b in (0, 1):
            allowed = np.flatnonzero(part.labels == b)  # ascending, so ties pick lowest
            table[b] = allowed[np.argmin(d2[:, allowed], axis=1)]
        maps.append(table)
    return maps


def _select_slots(frames: int, config: StegoConfig, rng: np.random.Generator) -> np.ndarray:
    """Choose payload slots; returns an (n, 2) array of (frame, position), t-major."""
    positions = np.asarray(config.positions_used, dtype=np.int64)
    if config.frame_level:
        chosen = np.flatnonzero(rng.random(frames) < config.embedding_rate)
        t = np.repeat(chosen, positions.size)
        p = np.tile(positions, chosen.size)
    else:
        mask = rng.random((frames, positions.size)) < config.embedding_rate
        tt, pp = np.nonzero(mask)
        t, p = tt, positions[pp]
    return np.stack([t, p], axis=1) if t.size else np.empty((0, 2), dtype=np.int64)


def embed_bits(
    cover: QisSample,
    bits,
    config: StegoConfig,
    codebooks: list[Codebook],
    partitions: list[Partition],
    seed: int,
    maps: list[np.ndarray] | None = None,
):
    """Embed `bits` into a cover, returning (stego sample, embed log).

    Slot selection is Bernoulli(embedding_rate) driven by `seed`; bits are
    consumed frame-major, positions ascending. The log lists every selected
    slot as a (frame, position) row even when requantization leaves the index
    unchanged. The output label is STEGO exactly when the log is nonempty.
    """
    if maps is None:
        maps = requant_maps(codebooks, partitions)
    bits = np.asarray(bits, dtype=np.int64).ravel()
    if bits.size and not np.isin(bits, (0, 1)).all():
        raise ValueError("payload bits must be 0 or 1")
    rng = np.random.default_rng(seed)
    log = _select_slots(cover.frames, config, rng)
    if log.shape[0] > bits.size:
        raise BitExhaustion(
            f"selected {log.shape[0]} slots but only {bits.size} bits supplied"
        )
    indices = cover.indices.copy()
    for (t, p), b in zip(log, bits[: log.shape[0]]):
        indices[t, p] = maps[p][b, indices[t, p]]
    label = STEGO if log.shape[0] > 0 else COVER
    meta = SampleMeta(
        seed=int(seed),
        embedding_rate=float(config.embedding_rate) if label == STEGO else 0.0,
        duration_ms=cover.meta.duration_ms,
    )
    return QisSample(indices=indices, label=label, meta=meta), log


def extract_bits(stego: QisSample, embed_log: np.ndarray, partitions: list[Partition]) -> np.ndarray:
    """Read embedded bits back: the partition label of each logged index."""
    log = np.asarray(embed_log, dtype=np.int64).reshape(-1, 2)
    out = np.empty(log.shape[0], dtype=np.int64)
    for i, (t, p) in enumerate(log):
        out[i] = int(partitions[p].labels[stego.indices[t, p]])
    return out


def make_stego_corpus(
    cover_corpus: Corpus,
    config: StegoConfig,
    seed: int,
    codebooks: list[Codebook] | None = None,
    partitions: list[Partition] | None = None,
) -> Corpus:
    """Embed random payloads into every cover of a corpus.

    Per-sample selection and payload seeds derive from (seed, config.bit_seed),
    so the result is a pure function of its arguments.
    """
    if codebooks is None or partitions is None:
        codebooks, partitions = default_codebooks(cover_corpus.codec_shape, seed=config.bit_seed)
    maps = requant_maps(codebooks, partitions)
    n = len(cover_corpus.samples)
    seeds = derive_seeds((int(seed), int(config.bit_seed)), 2 * n)
    samples = []
    for i, cover in enumerate(cover_corpus.samples):
        bit_rng = np.random.default_rng(seeds[n + i])
        bits = bit_rng.integers(0, 2, cover.frames * len(config.positions_used))
        stego, _ = embed_bits(cover, bits, config, codebooks, partitions, seeds[i], maps=maps)
        samples.append(stego)
    return Corpus(codec_shape=cover_corpus.codec_shape, samples=samples)


# --- QIMP1 codebook/partition sidecar ------------------------------------------
#
# Text, line oriented:
#   QIMP1
#   positions 3
#   codebook 0 size 128 dim 10 seed 17
#   <size> lines of <dim> repr() floats
#   partition 0 seed 23
#   one line of <size> 0/1 labels
#   ... repeated per position


def _fmt_float(x: float) -> str:
    return repr(float(x))


def write_sidecar(codebooks: list[Codebook], partitions: list[Partition], destination) -> None:
    if len(codebooks) != len(partitions):
        raise ShapeMismatch("need one partition per codebook")
    lines = [SIDECAR_MAGIC, f"positions {len(codebooks)}"]
    for p, (cb, part) in enumerate(zip(codebooks, partitions)):
        if cb.position != p:
            raise ShapeMismatch(f"codebook at slot {p} claims position {cb.position}")
        if cb.size != part.labels.size:
            raise ShapeMismatch(f"position {p}: codebook/partition size mismatch")
        lines.append(f"codebook {p} size {cb.size} dim {cb.dim} seed {int(cb.seed)}")
        for row in cb.vectors:
            lines.append(" ".join(_fmt_float(v) for v in row))
        lines.append(f"partition {p} seed {int(part.seed)}")
        lines.append(" ".join(str(int(b)) for b in part.labels))
    text = "\n".join(lines) + "\n"
    if hasattr(destination, "write"):
        destination.write(text)
    else:
        Path(destination).write_text(text, encoding="ascii")


def read_sidecar(source):
    if hasattr(source, "read"):
        text = source.read()
    else:
        text = Path(source).read_text(encoding="ascii")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    pos = 0

    def next_line(what: str) -> str:
        nonlocal pos
        if pos >= len(lines):
            raise FormatError(f"unexpected end of file, expected {what}", line=pos + 1)
        ln = lines[pos]
        pos += 1
        return ln

    if next_line("magic") != SIDECAR_MAGIC:
        raise FormatError(f"bad magic, expected {SIDECAR_MAGIC!r}", line=1, offset=0)
    head = next_line("positions").split()
    if len(head) != 2 or head[0] != "positions":
        raise FormatError("expected 'positions N'", line=2)
    n_positions = int(head[1])
    codebooks: list[Codebook] = []
    partitions: list[Partition] = []
    for p in range(n_positions):
        cb_line = next_line("codebook header").split()
        if (len(cb_line) != 8 or cb_line[0] != "codebook" or cb_line[2] != "size"
                or cb_line[4] != "dim" or cb_line[6] != "seed"):
            raise FormatError("expected 'codebook P size S dim D seed X'", line=pos)
        try:
            cb_pos, size, dim, cb_seed = (int(cb_line[i]) for i in (1, 3, 5, 7))
        except ValueError as e:
            raise FormatError(f"bad codebook header: {e}", line=pos) from e
        if cb_pos != p:
            raise FormatError(f"codebook position {cb_pos} out of order, expected {p}", line=pos)
        vectors = np.empty((size, dim))
        for i in range(size):
            row_no = pos + 1
            row = next_line("codebook row").split()
            if len(row) != dim:
                raise FormatError(f"expected {dim} floats, got {len(row)}", line=row_no)
            try:
                vectors[i] = [float(v) for v in row]
            except ValueError as e:
                raise FormatError(f"bad float in codebook row: {e}", line=row_no) from e
        part_line = next_line("partition header").split()
        if len(part_line) != 4 or part_line[0] != "partition" or part_line[2] != "seed":
            raise FormatError("expected 'partition P seed X'", line=pos)
        if int(part_line[1]) != p:
            raise FormatError(f"partition position {part_line[1]} out of order", line=pos)
        part_seed = int(part_line[3])
        lab_no = pos + 1
        lab_row = next_line("partition labels").split()
        if len(lab_row) != size:
            raise FormatError(f"expected {size} labels, got {len(lab_row)}", line=lab_no)
        labels = np.array([int(b) for b in lab_row], dtype=np.uint8)
        part = Partition(labels=labels, seed=part_seed)
        try:
            part.validate()
        except ValueError as e:
            raise FormatError(str(e), line=lab_no) from e
        codebooks.append(Codebook(position=p, vectors=vectors, seed=cb_seed))
        partitions.append(part)
    if pos != len(lines):
        raise FormatError("trailing content after declared positions", line=pos + 1)
    return codebooks, partitions
