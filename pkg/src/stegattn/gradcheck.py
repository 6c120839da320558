"""Finite-difference oracle for the hand-derived gradients.

Central differences of the scalar loss, parameter by parameter, against the
analytic backward pass. Checks run on a deliberately small configuration so
the full parameter sweep stays fast; the math is dimension independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, ModelParams, backward, bce_from_logit, forward
from .qis import QisSample

# Relative errors below this are indistinguishable from float64 noise.
_NORM_FLOOR = 1e-12


def small_check_config() -> ModelConfig:
    """Tiny architecture for exhaustive finite-difference sweeps.

    Dropout must stay off: its mask makes the loss non-differentiable in the
    parameters only through chance, and not reproducible under perturbation.
    """
    return ModelConfig(
        window_frames=4,
        embedding_size=6,
        heads=2,
        head_dim=3,
        dropout_rate=0.0,
        codebook_sizes=(5, 4, 3),
    )


def random_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """All parameters uniform in [-0.5, 0.5], including the readout.

    The standard initializer zeroes the readout, which would zero every
    attention and embedding gradient and make the check vacuous.
    """
    d, k = config.frame_dim, config.head_dim
    def u(*shape):
        return rng.uniform(-0.5, 0.5, size=shape)
    return ModelParams(
        embedding=u(config.vocab_size, config.embedding_size),
        w_query=u(config.heads, d, k),
        w_key=u(config.heads, d, k),
        w_value=u(config.heads, d, k),
        w_out=u(config.window_frames, config.feature_width),
        b_out=np.asarray(u()),
    )


def random_sample(config: ModelConfig, rng: np.random.Generator) -> QisSample:
    sizes = np.asarray(config.codebook_sizes)
    indices = rng.integers(0, sizes, size=(config.window_frames, 3))
    return QisSample(indices=indices.astype(np.int64))


@dataclass
class GradCheckReport:
    seed: int
    epsilon: float
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def render(self) -> str:
        lines = [f"seed={self.seed} epsilon={self.epsilon:g} tolerance={self.tolerance:g}"]
        for name, err in self.errors.items():
            mark = "ok" if err < self.tolerance else "FAIL"
            lines.append(f"  {name:<12s} rel_err={err:.3e} {mark}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a|| + ||n||, floor); 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / max(denom, _NORM_FLOOR))


def grad_check(
    config: ModelConfig | None = None,
    seed: int = 0,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    backward_fn=backward,
) -> GradCheckReport:
    """Compare `backward_fn` to central finite differences on one random case.

    Every parameter entry is perturbed by +/- epsilon and the loss difference
    quotient compared against the analytic gradient, one relative error per
    parameter tensor. `backward_fn` is swappable so a deliberately corrupted
    backward pass can be shown to fail.
    """
    if config is None:
        config = small_check_config()
    if config.dropout_rate != 0.0:
        raise ValueError("gradient checking requires dropout_rate == 0")
    rng = np.random.default_rng(seed)
    params = random_params(config, rng)
    sample = random_sample(config, rng)
    label = int(rng.integers(0, 2))

    cache = forward(sample, params, config, mode="infer")
    _, grads = backward_fn(cache, label, params, config)

    report = GradCheckReport(seed=seed, epsilon=epsilon, tolerance=tolerance)
    tree = params.tree()
    grad_tree = grads.tree()
    for name, arr in tree.items():
        numeric = np.empty_like(np.atleast_1d(arr), dtype=np.float64)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = _loss(sample, label, params, config)
            flat[i] = orig - epsilon
            down = _loss(sample, label, params, config)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2.0 * epsilon)
        report.errors[name] = relative_error(grad_tree[name], numeric.reshape(arr.shape))
    return report


def _loss(sample, label, params, config) -> float:
    cache = forward(sample, params, config, mode="infer")
    return float(bce_from_logit(np.float64(cache.z), label))


def grad_check_many(
    n_seeds: int = 20,
    config: ModelConfig | None = None,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    start_seed: int = 0,
) -> list[GradCheckReport]:
    """Independent checks over consecutive seeds; all must pass."""
    return [
        grad_check(config=config, seed=s, epsilon=epsilon, tolerance=tolerance)
        for s in range(start_seed, start_seed + n_seeds)
    ]
