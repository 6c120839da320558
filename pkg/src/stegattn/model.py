"""Attention-only steganalysis classifier with hand-derived gradients.

One multi-head attention layer over embedded index frames, then a linear
readout of the flattened attention output through a sigmoid. No residuals,
no layer norm, no feed-forward block: detection rests entirely on which
frame pairs the attention heads correlate.

Every frame contributes three codebook indices; each index selects a row of
a shared embedding table (positions are disambiguated by fixed row offsets)
and the three rows are concatenated into the frame vector. Inner-product
attention logits are unscaled by default. All gradients are derived and
implemented by hand; `gradcheck` holds the finite-difference oracle.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from .qis import FormatError, QisSample, ShapeMismatch

CHECKPOINT_MAGIC = "FCEM1"

# Softmax logits are shifted row-wise by their max, then clamped here. The
# clamp only ever binds from below, and each binding entry is counted.
LOGIT_CLAMP = 50.0

# Probabilities are reported inside an open interval so downstream logs
# never take log(0).
PROB_EPS = 1e-12

# Upper bound on elements of any (batch, heads, T, T) attention tensor held
# at once; batches are processed in chunks this size allows.
MAX_ALPHA_ELEMS = 6_000_000


class NonFiniteActivation(FloatingPointError):
    """A forward-pass activation left the finite float range."""


class NonFiniteGradient(FloatingPointError):
    """A backward-pass gradient left the finite float range."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; the window length fixes the readout size."""

    window_frames: int = 30
    embedding_size: int = 100
    heads: int = 8
    head_dim: int = 32
    dropout_rate: float = 0.6
    codebook_sizes: tuple[int, ...] = (128, 32, 32)
    scaled_attention: bool = False
    use_positional_encoding: bool = True

    def __post_init__(self):
        object.__setattr__(self, "codebook_sizes", tuple(int(s) for s in self.codebook_sizes))
        if len(self.codebook_sizes) != 3 or any(s < 2 for s in self.codebook_sizes):
            raise ValueError("need 3 codebooks of size at least 2")
        if self.window_frames < 1:
            raise ValueError("window must hold at least one frame")
        if self.embedding_size < 1 or self.heads < 1 or self.head_dim < 1:
            raise ValueError("embedding size, heads and head dim must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")

    @property
    def positions(self) -> int:
        return 3

    @property
    def vocab_size(self) -> int:
        return sum(self.codebook_sizes)

    @property
    def offsets(self) -> tuple[int, ...]:
        s = self.codebook_sizes
        return (0, s[0], s[0] + s[1])

    @property
    def frame_dim(self) -> int:
        """Width of one embedded frame: three concatenated index embeddings."""
        return self.positions * self.embedding_size

    @property
    def feature_width(self) -> int:
        """Width of the concatenated multi-head output per frame."""
        return self.heads * self.head_dim

    @property
    def parameter_count(self) -> int:
        d, k = self.frame_dim, self.head_dim
        return (
            self.vocab_size * self.embedding_size
            + self.heads * 3 * d * k
            + self.window_frames * self.feature_width
            + 1
        )


@dataclass(eq=False)
class ParamTree:
    """Named arrays shared by parameters and their gradients."""

    embedding: np.ndarray  # (vocab, embedding_size)
    w_query: np.ndarray  # (heads, frame_dim, head_dim)
    w_key: np.ndarray  # (heads, frame_dim, head_dim)
    w_value: np.ndarray  # (heads, frame_dim, head_dim)
    w_out: np.ndarray  # (window_frames, feature_width)
    b_out: np.ndarray  # () scalar

    def tree(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self):
        return type(self)(**{k: v.copy() for k, v in self.tree().items()})

    def size(self) -> int:
        return sum(v.size for v in self.tree().values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamTree):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.tree().values(), other.tree().values()))


class ModelParams(ParamTree):
    pass


class Gradients(ParamTree):
    pass


def _glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[-2] + shape[-1]))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform embeddings and projections; zero readout.

    The zero readout makes the untrained classifier output exactly 0.5.
    """
    rng = np.random.default_rng(seed)
    d, k = config.frame_dim, config.head_dim
    return ModelParams(
        embedding=_glorot(rng, (config.vocab_size, config.embedding_size)),
        w_query=_glorot(rng, (config.heads, d, k)),
        w_key=_glorot(rng, (config.heads, d, k)),
        w_value=_glorot(rng, (config.heads, d, k)),
        w_out=np.zeros((config.window_frames, config.feature_width)),
        b_out=np.zeros(()),
    )


@lru_cache(maxsize=32)
def positional_encoding(frames: int, dim: int) -> np.ndarray:
    """Sinusoidal positions: sin on even columns, cos on odd, shared exponent.

    Column 2i uses sin(t / 10000^(2i/dim)) and column 2i+1 the matching cos;
    t counts from 0. Returned array is read only (it is cached).
    """
    pe = np.zeros((frames, dim))
    t = np.arange(frames, dtype=np.float64)[:, None]
    even = np.arange(0, dim, 2, dtype=np.float64)
    angle = t / np.power(10000.0, even / dim)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    pe.setflags(write=False)
    return pe


def shifted_indices(indices: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Map per-position indices into the shared embedding row space."""
    off = np.asarray(config.offsets, dtype=np.int64)
    return indices.astype(np.int64) + off


def embed_lookup(sample: QisSample, embedding: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Embed one sample: per frame, concatenate the three index embeddings."""
    if sample.frames != config.window_frames:
        raise ShapeMismatch(
            f"sample has {sample.frames} frames, model expects {config.window_frames}"
        )
    u = shifted_indices(sample.indices, config)
    x = embedding[u].reshape(sample.frames, config.frame_dim)
    if config.use_positional_encoding:
        x = x + positional_encoding(sample.frames, config.frame_dim)
    return x


def _softmax_rows(phi: np.ndarray):
    """Row softmax over the last axis with max shift and clamped logits.

    Works in place on `phi`. Returns (alpha, keep_mask, argmax, n_clamped);
    the mask and argmax are None when the clamp never bound, since the
    backward pass only needs them to stay exact through a binding clamp.
    """
    if not np.isfinite(phi).all():
        raise NonFiniteActivation("attention logits are not finite")
    keep = None
    amax = None
    shifted = phi
    shifted -= phi.max(axis=-1, keepdims=True)
    n_clamped = int((shifted < -LOGIT_CLAMP).sum())
    if n_clamped:
        amax = shifted.argmax(axis=-1)
        keep = shifted >= -LOGIT_CLAMP
        np.clip(shifted, -LOGIT_CLAMP, LOGIT_CLAMP, out=shifted)
    alpha = np.exp(shifted, out=shifted)
    alpha /= alpha.sum(axis=-1, keepdims=True)
    return alpha, keep, amax, n_clamped


def _softmax_rows_backward(dalpha, alpha, keep, amax):
    """Exact gradient through softmax, clamp and max shift.

    dphi = alpha * (dalpha - rowsum(dalpha * alpha)) through the softmax.
    When the clamp bound somewhere, gradients are zeroed there and the row
    sum is pushed back onto the shift pivot (elsewhere rows already sum to
    zero, so the pivot term vanishes). Consumes `dalpha` as scratch.
    """
    dalpha -= (dalpha * alpha).sum(axis=-1, keepdims=True)
    ds = np.multiply(alpha, dalpha, out=dalpha)
    if keep is not None:
        ds *= keep
        pivot = np.take_along_axis(ds, amax[..., None], axis=-1)
        pivot = pivot - ds.sum(axis=-1, keepdims=True)
        np.put_along_axis(ds, amax[..., None], pivot, axis=-1)
    return ds


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def bce_from_logit(z: np.ndarray, label) -> np.ndarray:
    """Binary cross entropy evaluated from the logit, overflow safe."""
    y = np.asarray(label, dtype=np.float64)
    softplus_neg = np.maximum(-z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return softplus_neg + (1.0 - y) * z


def clip_probability(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


@dataclass(eq=False)
class ForwardCache:
    """Intermediates one forward pass must keep for the backward pass."""

    rows: np.ndarray  # (T * 3,) embedding rows used, frame major
    x: np.ndarray  # (T, frame_dim) embedded input
    q: np.ndarray  # (heads, T, head_dim)
    k: np.ndarray
    v: np.ndarray
    alpha: np.ndarray  # (heads, T, T)
    keep: np.ndarray | None  # (heads, T, T) bool, None unless the clamp bound
    amax: np.ndarray | None  # (heads, T), None unless the clamp bound
    head_out: np.ndarray  # (T, feature_width) dropout already applied
    drop_mask: np.ndarray | None  # (T, feature_width) bool, None outside training
    z: float
    y_hat: float
    n_clamped: int


def attention_head(x, w_query, w_key, w_value, scaled: bool = False):
    """One head: inner-product logits over frames, then weighted value mix.

    Logits are unscaled unless `scaled` divides them by sqrt(head_dim).
    Returns (head output, attention weights).
    """
    q = x @ w_query
    k = x @ w_key
    v = x @ w_value
    phi = q @ k.T
    if scaled:
        phi = phi / np.sqrt(w_query.shape[-1])
    alpha, _, _, _ = _softmax_rows(phi)
    return alpha @ v, alpha


def forward(
    sample: QisSample,
    params: ModelParams,
    config: ModelConfig,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    pe: np.ndarray | None = None,
) -> ForwardCache:
    """Run the classifier on one sample; `mode="train"` applies dropout.

    Training mode needs `rng` for the dropout mask. `pe` overrides the cached
    positional encoding (used to share work across calls).
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "train" and config.dropout_rate > 0.0 and rng is None:
        raise ValueError("training mode with dropout needs an rng")
    u = shifted_indices(sample.indices, config)
    if sample.frames != config.window_frames:
        raise ShapeMismatch(
            f"sample has {sample.frames} frames, model expects {config.window_frames}"
        )
    x = params.embedding[u].reshape(sample.frames, config.frame_dim)
    if config.use_positional_encoding:
        x = x + (pe if pe is not None else positional_encoding(sample.frames, config.frame_dim))

    q = np.matmul(x[None], params.w_query)  # (heads, T, head_dim)
    k = np.matmul(x[None], params.w_key)
    v = np.matmul(x[None], params.w_value)
    phi = np.matmul(q, k.transpose(0, 2, 1))
    if config.scaled_attention:
        phi = phi / np.sqrt(config.head_dim)
    alpha, keep, amax, n_clamped = _softmax_rows(phi)
    heads = np.matmul(alpha, v)  # (heads, T, head_dim)
    head_out = heads.transpose(1, 0, 2).reshape(sample.frames, config.feature_width)

    drop_mask = None
    if mode == "train" and config.dropout_rate > 0.0:
        drop_mask = rng.random(head_out.shape) >= config.dropout_rate
        head_out = np.where(drop_mask, head_out / (1.0 - config.dropout_rate), 0.0)

    z = float(np.tensordot(head_out, params.w_out, axes=([0, 1], [0, 1])) + params.b_out)
    if not np.isfinite(z):
        raise NonFiniteActivation("classifier logit is not finite")
    y_hat = float(clip_probability(_sigmoid(np.float64(z))))
    return ForwardCache(
        rows=u.ravel(),
        x=x,
        q=q,
        k=k,
        v=v,
        alpha=alpha,
        keep=keep,
        amax=amax,
        head_out=head_out,
        drop_mask=drop_mask,
        z=z,
        y_hat=y_hat,
        n_clamped=n_clamped,
    )


def predict(sample: QisSample, params: ModelParams, config: ModelConfig) -> float:
    return forward(sample, params, config, mode="infer").y_hat


def backward(cache: ForwardCache, label: int, params: ModelParams, config: ModelConfig):
    """Gradient of the binary cross entropy for one cached forward pass.

    Returns (loss, Gradients). The logit gradient is y_hat - label; embedding
    gradients scatter-accumulate over repeated index rows.
    """
    loss = float(bce_from_logit(np.float64(cache.z), label))
    dz = _sigmoid(np.float64(cache.z)) - float(label)

    grads = Gradients(
        embedding=np.zeros_like(params.embedding),
        w_query=np.empty_like(params.w_query),
        w_key=np.empty_like(params.w_key),
        w_value=np.empty_like(params.w_value),
        w_out=dz * cache.head_out,
        b_out=np.asarray(dz),
    )
    dhead_out = dz * params.w_out
    if cache.drop_mask is not None:
        dhead_out = np.where(cache.drop_mask, dhead_out / (1.0 - config.dropout_rate), 0.0)

    t = config.window_frames
    dheads = dhead_out.reshape(t, config.heads, config.head_dim).transpose(1, 0, 2)
    dalpha = np.matmul(dheads, cache.v.transpose(0, 2, 1))
    dv = np.matmul(cache.alpha.transpose(0, 2, 1), dheads)
    dphi = _softmax_rows_backward(dalpha, cache.alpha, cache.keep, cache.amax)
    if config.scaled_attention:
        dphi = dphi / np.sqrt(config.head_dim)
    dq = np.matmul(dphi, cache.k)
    dk = np.matmul(dphi.transpose(0, 2, 1), cache.q)

    xt = cache.x.T
    dx = np.zeros_like(cache.x)
    for h in range(config.heads):
        grads.w_query[h] = xt @ dq[h]
        grads.w_key[h] = xt @ dk[h]
        grads.w_value[h] = xt @ dv[h]
        dx += dq[h] @ params.w_query[h].T
        dx += dk[h] @ params.w_key[h].T
        dx += dv[h] @ params.w_value[h].T

    scatter_rows(grads.embedding, cache.rows, dx.reshape(-1, config.embedding_size))
    for name, g in grads.tree().items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"gradient for {name} is not finite")
    return loss, grads


def loss_and_grads(sample: QisSample, label: int, params: ModelParams, config: ModelConfig,
                   mode: str = "infer", rng: np.random.Generator | None = None):
    cache = forward(sample, params, config, mode=mode, rng=rng)
    return backward(cache, label, params, config)


def scatter_rows(target: np.ndarray, rows: np.ndarray, values: np.ndarray) -> None:
    """target[rows[i]] += values[i] with duplicate rows accumulated.

    Column-wise bincount beats np.add.at by a wide margin at these sizes.
    """
    minlength = target.shape[0]
    for c in range(target.shape[1]):
        target[:, c] += np.bincount(rows, weights=values[:, c], minlength=minlength)


def _batch_chunk(batch: int, config: ModelConfig) -> int:
    t = config.window_frames
    per_sample = config.heads * t * t
    return max(1, min(batch, int(MAX_ALPHA_ELEMS // per_sample)))


def _embed_batch(indices: np.ndarray, embedding: np.ndarray, config: ModelConfig,
                 pe: np.ndarray | None):
    b, t, _ = indices.shape
    u = shifted_indices(indices, config).reshape(b, -1)
    x = embedding[u].reshape(b, t, config.frame_dim)
    if config.use_positional_encoding:
        x += pe if pe is not None else positional_encoding(t, config.frame_dim)
    return u, x


def _cat_projections(params: ModelParams, config: ModelConfig, dtype=np.float64) -> np.ndarray:
    """Stack the query/key/value projections into one (frame_dim, 3 * heads *
    head_dim) matrix so the whole projection step is a single GEMM."""
    d, hk = config.frame_dim, config.feature_width

    def cat(w):
        return w.transpose(1, 0, 2).reshape(d, hk)

    joint = np.concatenate([cat(params.w_query), cat(params.w_key), cat(params.w_value)], axis=1)
    return joint.astype(dtype, copy=False)


def _split_heads(flat: np.ndarray, config: ModelConfig) -> np.ndarray:
    """(n, T, heads * head_dim) -> contiguous (n, heads, T, head_dim)."""
    n, t, _ = flat.shape
    per_head = flat.reshape(n, t, config.heads, config.head_dim)
    return np.ascontiguousarray(per_head.transpose(0, 2, 1, 3))


def _merge_heads(heads: np.ndarray, config: ModelConfig) -> np.ndarray:
    """(n, heads, T, head_dim) -> contiguous (n, T, heads * head_dim)."""
    n = heads.shape[0]
    merged = heads.transpose(0, 2, 1, 3)
    return np.ascontiguousarray(merged).reshape(n, config.window_frames, config.feature_width)


def predict_batch(
    indices: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    dtype=np.float64,
) -> np.ndarray:
    """Inference probabilities for a (batch, T, 3) index array.

    `dtype=np.float32` runs the whole pass in single precision (the training
    path is float64 only).
    """
    b, t, _ = indices.shape
    if t != config.window_frames:
        raise ShapeMismatch(f"batch has {t} frames, model expects {config.window_frames}")
    emb = params.embedding.astype(dtype, copy=False)
    w_cat = _cat_projections(params, config, dtype)
    wo = params.w_out.astype(dtype, copy=False)
    b_out = params.b_out.astype(dtype, copy=False)
    pe = None
    if config.use_positional_encoding:
        pe = positional_encoding(t, config.frame_dim).astype(dtype, copy=False)
    hk = config.feature_width
    out = np.empty(b, dtype=dtype)
    chunk = _batch_chunk(b, config)
    for lo in range(0, b, chunk):
        hi = min(lo + chunk, b)
        n = hi - lo
        _, x = _embed_batch(indices[lo:hi], emb, config, pe)
        qkv = (x.reshape(n * t, -1) @ w_cat).reshape(n, t, 3 * hk)
        q = _split_heads(qkv[:, :, :hk], config)
        k = _split_heads(qkv[:, :, hk : 2 * hk], config)
        v = _split_heads(qkv[:, :, 2 * hk :], config)
        phi = np.matmul(q, k.transpose(0, 1, 3, 2))
        if config.scaled_attention:
            phi = phi / np.sqrt(dtype(config.head_dim))
        alpha, _, _, _ = _softmax_rows(phi)
        head_out = _merge_heads(np.matmul(alpha, v), config)
        z = np.tensordot(head_out, wo, axes=([1, 2], [0, 1])) + b_out
        out[lo:hi] = clip_probability(_sigmoid(z))
    return out


def batch_loss_and_grads(
    indices: np.ndarray,
    labels: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    rng: np.random.Generator | None = None,
):
    """Fused forward/backward over a (batch, T, 3) index array.

    Returns (per-sample losses, gradients summed over the batch, clamp count).
    Dropout masks for the whole batch are drawn up front, so results do not
    depend on the internal chunk size. Work runs in float64 throughout.
    """
    b, t, _ = indices.shape
    if t != config.window_frames:
        raise ShapeMismatch(f"batch has {t} frames, model expects {config.window_frames}")
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (b,):
        raise ShapeMismatch(f"expected {b} labels, got shape {labels.shape}")
    train = rng is not None and config.dropout_rate > 0.0
    drop_mask = None
    if train:
        drop_mask = rng.random((b, t, config.feature_width)) >= config.dropout_rate
    inv_keep = 1.0 / (1.0 - config.dropout_rate) if train else 1.0

    pe = positional_encoding(t, config.frame_dim) if config.use_positional_encoding else None
    losses = np.empty(b)
    grads = Gradients(
        embedding=np.zeros_like(params.embedding),
        w_query=np.empty_like(params.w_query),
        w_key=np.empty_like(params.w_key),
        w_value=np.empty_like(params.w_value),
        w_out=np.zeros_like(params.w_out),
        b_out=np.zeros(()),
    )
    w_cat = _cat_projections(params, config)
    dw_cat = np.zeros_like(w_cat)
    d, hk = config.frame_dim, config.feature_width
    n_clamped = 0
    chunk = _batch_chunk(b, config)
    for lo in range(0, b, chunk):
        hi = min(lo + chunk, b)
        n = hi - lo
        u, x = _embed_batch(indices[lo:hi], params.embedding, config, pe)
        x2 = x.reshape(n * t, d)
        qkv = (x2 @ w_cat).reshape(n, t, 3 * hk)
        q = _split_heads(qkv[:, :, :hk], config)
        k = _split_heads(qkv[:, :, hk : 2 * hk], config)
        v = _split_heads(qkv[:, :, 2 * hk :], config)
        phi = np.matmul(q, k.transpose(0, 1, 3, 2))
        if config.scaled_attention:
            phi = phi / np.sqrt(config.head_dim)
        alpha, keep, amax, clamped = _softmax_rows(phi)
        n_clamped += clamped
        head_out = _merge_heads(np.matmul(alpha, v), config)
        if train:
            mask = drop_mask[lo:hi]
            head_out *= mask
            head_out *= inv_keep
        z = np.tensordot(head_out, params.w_out, axes=([1, 2], [0, 1])) + params.b_out
        if not np.isfinite(z).all():
            raise NonFiniteActivation("classifier logits are not finite")
        y = labels[lo:hi]
        losses[lo:hi] = bce_from_logit(z, y)
        dz = _sigmoid(z) - y

        grads.w_out += np.tensordot(dz, head_out, axes=(0, 0))
        grads.b_out += dz.sum()
        dhead_out = dz[:, None, None] * params.w_out[None]
        if train:
            dhead_out *= mask
            dhead_out *= inv_keep
        dheads = _split_heads(dhead_out, config)
        dalpha = np.matmul(dheads, v.transpose(0, 1, 3, 2))
        dv = np.matmul(alpha.transpose(0, 1, 3, 2), dheads)
        dphi = _softmax_rows_backward(dalpha, alpha, keep, amax)
        if config.scaled_attention:
            dphi = dphi / np.sqrt(config.head_dim)
        dq = np.matmul(dphi, k)
        dk = np.matmul(dphi.transpose(0, 1, 3, 2), q)

        dqkv = np.empty((n, t, 3 * hk))
        dqkv[:, :, :hk] = _merge_heads(dq, config)
        dqkv[:, :, hk : 2 * hk] = _merge_heads(dk, config)
        dqkv[:, :, 2 * hk :] = _merge_heads(dv, config)
        dqkv2 = dqkv.reshape(n * t, 3 * hk)
        dw_cat += x2.T @ dqkv2
        dx2 = dqkv2 @ w_cat.T
        scatter_rows(grads.embedding, u.ravel(), dx2.reshape(-1, config.embedding_size))

    def uncat(block):
        return np.ascontiguousarray(block.reshape(d, config.heads, config.head_dim).transpose(1, 0, 2))

    grads.w_query[:] = uncat(dw_cat[:, :hk])
    grads.w_key[:] = uncat(dw_cat[:, hk : 2 * hk])
    grads.w_value[:] = uncat(dw_cat[:, 2 * hk :])
    for name, g in grads.tree().items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"gradient for {name} is not finite")
    return losses, grads, n_clamped


# --- FCEM1 checkpoint format ----------------------------------------------
#
# Text header through the "end" line, then raw little-endian float64 blobs
# in fixed order: embedding; per head w_query[h], w_key[h], w_value[h]
# interleaved; w_out; b_out.


def _header_lines(config: ModelConfig) -> list[str]:
    return [
        CHECKPOINT_MAGIC,
        f"window_frames {config.window_frames}",
        f"embedding_size {config.embedding_size}",
        f"heads {config.heads}",
        f"head_dim {config.head_dim}",
        f"dropout_rate {float(config.dropout_rate)!r}",
        "codebook_sizes " + " ".join(str(s) for s in config.codebook_sizes),
        f"scaled_attention {int(config.scaled_attention)}",
        f"use_positional_encoding {int(config.use_positional_encoding)}",
        "dtype <f8",
        "end",
    ]


def _blob_order(params: ModelParams, config: ModelConfig):
    yield params.embedding
    for h in range(config.heads):
        yield params.w_query[h]
        yield params.w_key[h]
        yield params.w_value[h]
    yield params.w_out
    yield params.b_out


def save_checkpoint(params: ModelParams, config: ModelConfig, destination) -> None:
    header = ("\n".join(_header_lines(config)) + "\n").encode("ascii")
    buf = io.BytesIO()
    buf.write(header)
    for arr in _blob_order(params, config):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    data = buf.getvalue()
    if hasattr(destination, "write"):
        destination.write(data)
    else:
        Path(destination).write_bytes(data)


def load_checkpoint(source) -> tuple[ModelParams, ModelConfig]:
    if hasattr(source, "read"):
        data = source.read()
    else:
        data = Path(source).read_bytes()
    end_marker = b"\nend\n"
    head_end = data.find(end_marker)
    if head_end < 0:
        raise FormatError("no header terminator found")
    lines = data[:head_end].decode("ascii", errors="replace").split("\n")
    if lines[0] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {lines[0]!r}, expected {CHECKPOINT_MAGIC!r}", line=1, offset=0)
    kv = {}
    for i, ln in enumerate(lines[1:], start=2):
        parts = ln.split(None, 1)
        if len(parts) != 2:
            raise FormatError(f"bad header line {ln!r}", line=i)
        kv[parts[0]] = parts[1]
    try:
        if kv.pop("dtype") != "<f8":
            raise FormatError("unsupported dtype, expected <f8")
        config = ModelConfig(
            window_frames=int(kv.pop("window_frames")),
            embedding_size=int(kv.pop("embedding_size")),
            heads=int(kv.pop("heads")),
            head_dim=int(kv.pop("head_dim")),
            dropout_rate=float(kv.pop("dropout_rate")),
            codebook_sizes=tuple(int(s) for s in kv.pop("codebook_sizes").split()),
            scaled_attention=bool(int(kv.pop("scaled_attention"))),
            use_positional_encoding=bool(int(kv.pop("use_positional_encoding"))),
        )
    except KeyError as e:
        raise FormatError(f"missing header key {e.args[0]!r}") from e
    except ValueError as e:
        raise FormatError(f"bad header value: {e}") from e
    if kv:
        raise FormatError(f"unknown header keys {sorted(kv)}")

    blob = data[head_end + len(end_marker):]
    d, k = config.frame_dim, config.head_dim
    shapes = [(config.vocab_size, config.embedding_size)]
    shapes += [(d, k)] * (3 * config.heads)
    shapes += [(config.window_frames, config.feature_width), ()]
    arrays = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise FormatError("checkpoint payload shorter than declared shapes")
        arrays.append(
            np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        )
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after parameters")
    params = ModelParams(
        embedding=arrays[0],
        w_query=np.stack(arrays[1 : 1 + 3 * config.heads : 3]),
        w_key=np.stack(arrays[2 : 2 + 3 * config.heads : 3]),
        w_value=np.stack(arrays[3 : 3 + 3 * config.heads : 3]),
        w_out=arrays[-2],
        b_out=arrays[-1],
    )
    return params, config
