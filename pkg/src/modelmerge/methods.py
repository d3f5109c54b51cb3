"""Tensor-level merge algorithms.

Every function here is pure: outputs depend only on the arguments, all
tensor arithmetic happens in float32, and nothing is mutated in place.
Randomized sparsification draws its mask from an explicit seed, so a
given (seed, tensor) pair always drops the same entries.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateWeights, ShapeMismatch
from .rng import uniform_stream

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-8

# Methods whose first input is the base model and the rest are deltas.
BASE_METHODS = frozenset({"task_arithmetic", "ties", "dare_ties", "dare_linear", "breadcrumbs"})


def _as_f32(t: np.ndarray) -> np.ndarray:
    return np.asarray(t, dtype=np.float32)


def _check_shapes(tensors: Sequence[np.ndarray]) -> None:
    shapes = {np.asarray(t).shape for t in tensors}
    if len(shapes) > 1:
        raise ShapeMismatch(f"tensors disagree in shape: {sorted(shapes)}")


def linear(tensors: Sequence[np.ndarray], weights: Sequence[float], normalize: bool = True) -> np.ndarray:
    """Weighted sum of tensors; divided by the weight total when normalizing.

    Raises DegenerateWeights if normalization is requested and the weights
    sum to zero.
    """
    if not tensors:
        raise ValueError("linear needs at least one tensor")
    if len(weights) != len(tensors):
        raise ValueError(f"{len(tensors)} tensors but {len(weights)} weights")
    _check_shapes(tensors)
    acc = np.zeros_like(_as_f32(tensors[0]))
    for w, t in zip(weights, tensors):
        acc += np.float32(w) * _as_f32(t)
    if normalize:
        total = math.fsum(weights)
        if total == 0.0:
            raise DegenerateWeights("normalize requested but weights sum to zero")
        acc /= np.float32(total)
    return acc


def slerp(t: float, p0: np.ndarray, p1: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Spherical linear interpolation between two tensors, flattened.

    The interpolation angle comes from unit-normalized copies, but the
    returned tensor interpolates the originals, so magnitudes blend too.
    Endpoints are exact: t=0 returns p0 and t=1 returns p1 bit for bit.
    Nearly colinear or zero-norm inputs fall back to linear interpolation.
    """
    p0 = _as_f32(p0)
    p1 = _as_f32(p1)
    _check_shapes([p0, p1])
    if t == 0.0:
        return p0.copy()
    if t == 1.0:
        return p1.copy()

    v0 = p0.ravel()
    v1 = p1.ravel()
    n0 = float(np.sqrt(np.sum(v0 * v0, dtype=np.float32)))
    n1 = float(np.sqrt(np.sum(v1 * v1, dtype=np.float32)))
    if n0 == 0.0 or n1 == 0.0:
        logger.debug("slerp: zero-norm input, falling back to lerp")
        return _lerp(t, p0, p1)

    dot = float(np.sum((v0 / np.float32(n0)) * (v1 / np.float32(n1)), dtype=np.float32))
    dot = max(-1.0, min(1.0, dot))
    if abs(dot) > 1.0 - eps:
        logger.debug("slerp: inputs (anti)colinear within eps, falling back to lerp")
        return _lerp(t, p0, p1)

    omega = math.acos(dot)
    s = math.sin(omega)
    c0 = np.float32(math.sin((1.0 - t) * omega) / s)
    c1 = np.float32(math.sin(t * omega) / s)
    return c0 * p0 + c1 * p1


def _lerp(t: float, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    return np.float32(1.0 - t) * p0 + np.float32(t) * p1


def task_vector(model: np.ndarray, base: np.ndarray) -> np.ndarray:
    """The delta a fine-tune applied to its base: model minus base."""
    model = _as_f32(model)
    base = _as_f32(base)
    _check_shapes([model, base])
    return model - base


def task_arithmetic(
    base: np.ndarray, task_vectors: Sequence[np.ndarray], lambdas: Sequence[float]
) -> np.ndarray:
    """base plus the lambda-weighted sum of task vectors."""
    if len(task_vectors) != len(lambdas):
        raise ValueError(f"{len(task_vectors)} task vectors but {len(lambdas)} lambdas")
    base = _as_f32(base)
    _check_shapes([base, *task_vectors])
    acc = base.copy()
    for lam, tau in zip(lambdas, task_vectors):
        acc += np.float32(lam) * _as_f32(tau)
    return acc


def trim_by_magnitude(tau: np.ndarray, density: float) -> np.ndarray:
    """Keep the ceil(density * n) largest-magnitude entries, zero the rest.

    Ties in magnitude are broken toward the lower flat index, so the kept
    set is deterministic. density=1 returns the input unchanged.
    """
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must be in (0, 1], got {density}")
    tau = _as_f32(tau)
    if density == 1.0 or tau.size == 0:
        return tau.copy()
    n = tau.size
    k = min(n, math.ceil(density * n))
    flat = tau.ravel()
    # Stable argsort on negated magnitudes: equal magnitudes keep index order.
    order = np.argsort(-np.abs(flat), kind="stable")
    keep = order[:k]
    out = np.zeros_like(flat)
    out[keep] = flat[keep]
    return out.reshape(tau.shape)


def breadcrumbs_mask(tau: np.ndarray, beta: float, gamma: float) -> np.ndarray:
    """Zero the floor(beta*n) largest and floor(gamma*n) smallest magnitudes.

    Both cuts use one consistent ranking (magnitude descending, ties toward
    the lower flat index), removing outlier updates and noise-level updates
    while keeping the middle of the spectrum.
    """
    if beta < 0.0 or gamma < 0.0 or beta + gamma >= 1.0:
        raise ValueError(f"need beta, gamma >= 0 and beta + gamma < 1, got {beta}, {gamma}")
    tau = _as_f32(tau)
    n = tau.size
    if n == 0:
        return tau.copy()
    kb = math.floor(beta * n)
    kg = math.floor(gamma * n)
    flat = tau.ravel()
    order = np.argsort(-np.abs(flat), kind="stable")
    out = flat.copy()
    if kb:
        out[order[:kb]] = 0.0
    if kg:
        out[order[n - kg:]] = 0.0
    return out.reshape(tau.shape)


def dare_drop(tau: np.ndarray, p: float, rescale: bool, seed: int) -> np.ndarray:
    """Randomly zero entries with probability p; scale survivors by 1/(1-p).

    The mask is a pure function of the seed, independent of scheduling.
    p=0 is an exact no-op and returns the input bit for bit.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must be in [0, 1), got {p}")
    tau = _as_f32(tau)
    if p == 0.0:
        return tau.copy()
    u = uniform_stream(seed, tau.size).reshape(tau.shape)
    out = np.where(u >= p, tau, np.float32(0.0))
    if rescale:
        out = out * np.float32(1.0 / (1.0 - p))
    return out


def elect_sign(task_vectors: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Per-element sign of the weighted task-vector sum; zero counts as +1."""
    if not task_vectors:
        raise ValueError("elect_sign needs at least one task vector")
    if len(task_vectors) != len(weights):
        raise ValueError(f"{len(task_vectors)} task vectors but {len(weights)} weights")
    _check_shapes(task_vectors)
    acc = np.zeros_like(_as_f32(task_vectors[0]))
    for w, tau in zip(weights, task_vectors):
        acc += np.float32(w) * _as_f32(tau)
    return np.where(acc < 0.0, np.float32(-1.0), np.float32(1.0))


def disjoint_merge(
    task_vectors: Sequence[np.ndarray], weights: Sequence[float], signs: np.ndarray
) -> np.ndarray:
    """Weighted mean per element over entries that match the elected sign.

    Zero entries never vote. Elements where nothing matches come out zero.
    """
    if len(task_vectors) != len(weights):
        raise ValueError(f"{len(task_vectors)} task vectors but {len(weights)} weights")
    signs = _as_f32(signs)
    _check_shapes([signs, *task_vectors])
    num = np.zeros_like(signs)
    den = np.zeros_like(signs)
    for w, tau in zip(weights, task_vectors):
        tau = _as_f32(tau)
        mask = (np.sign(tau) == signs) & (tau != 0.0)
        num += np.float32(w) * np.where(mask, tau, np.float32(0.0))
        den += np.float32(w) * mask.astype(np.float32)
    safe = np.where(den == 0.0, np.float32(1.0), den)
    return np.where(den == 0.0, np.float32(0.0), num / safe)


def ties_merge(
    base: np.ndarray,
    task_vectors: Sequence[np.ndarray],
    weights: Sequence[float],
    density: float | Sequence[float],
    lambda_out: float = 1.0,
) -> np.ndarray:
    """Trim task vectors, elect a consensus sign, merge the agreeing entries.

    The merged delta is scaled by lambda_out and added to base.
    """
    densities = _per_model(density, len(task_vectors), "density")
    trimmed = [trim_by_magnitude(tau, d) for tau, d in zip(task_vectors, densities)]
    signs = elect_sign(trimmed, weights)
    merged = disjoint_merge(trimmed, weights, signs)
    return _add_delta(base, merged, lambda_out)


def dare_ties_merge(
    base: np.ndarray,
    task_vectors: Sequence[np.ndarray],
    weights: Sequence[float],
    p: float | Sequence[float],
    rescale: bool,
    seeds: Sequence[int],
    lambda_out: float = 1.0,
) -> np.ndarray:
    """TIES sign election and disjoint merge over randomly dropped deltas."""
    ps = _per_model(p, len(task_vectors), "drop probability")
    if len(seeds) != len(task_vectors):
        raise ValueError(f"{len(task_vectors)} task vectors but {len(seeds)} seeds")
    dropped = [dare_drop(tau, pi, rescale, s) for tau, pi, s in zip(task_vectors, ps, seeds)]
    signs = elect_sign(dropped, weights)
    merged = disjoint_merge(dropped, weights, signs)
    return _add_delta(base, merged, lambda_out)


def dare_linear_merge(
    base: np.ndarray,
    task_vectors: Sequence[np.ndarray],
    lambdas: Sequence[float],
    p: float | Sequence[float],
    rescale: bool,
    seeds: Sequence[int],
) -> np.ndarray:
    """base plus the lambda-weighted sum of randomly dropped deltas."""
    ps = _per_model(p, len(task_vectors), "drop probability")
    if len(seeds) != len(task_vectors):
        raise ValueError(f"{len(task_vectors)} task vectors but {len(seeds)} seeds")
    dropped = [dare_drop(tau, pi, rescale, s) for tau, pi, s in zip(task_vectors, ps, seeds)]
    return task_arithmetic(base, dropped, lambdas)


def breadcrumbs_merge(
    base: np.ndarray,
    task_vectors: Sequence[np.ndarray],
    weights: Sequence[float],
    beta: float | Sequence[float],
    gamma: float | Sequence[float],
) -> np.ndarray:
    """base plus weighted masked deltas (outliers and noise floor removed)."""
    betas = _per_model(beta, len(task_vectors), "beta")
    gammas = _per_model(gamma, len(task_vectors), "gamma")
    masked = [breadcrumbs_mask(tau, b, g) for tau, b, g in zip(task_vectors, betas, gammas)]
    return task_arithmetic(base, masked, weights)


def _per_model(value: float | Sequence[float], n: int, what: str) -> list[float]:
    if isinstance(value, (int, float)):
        return [float(value)] * n
    out = [float(v) for v in value]
    if len(out) != n:
        raise ValueError(f"{n} task vectors but {len(out)} {what} values")
    return out


def _add_delta(base: np.ndarray, delta: np.ndarray, lambda_out: float) -> np.ndarray:
    base = _as_f32(base)
    _check_shapes([base, delta])
    if lambda_out == 1.0:
        return base + delta
    return base + np.float32(lambda_out) * delta


@dataclass(frozen=True)
class MethodContext:
    """Everything a merge method needs for one tensor, fully resolved.

    ``weights`` and the other per-model sequences are aligned with the
    non-base input tensors. ``seeds`` are per-model mask seeds, already
    derived from the global seed and tensor name.
    """

    method: str
    weights: tuple[float, ...] = ()
    t: float = 0.5
    densities: tuple[float, ...] = ()
    betas: tuple[float, ...] = ()
    gammas: tuple[float, ...] = ()
    seeds: tuple[int, ...] = ()
    normalize: bool = True
    rescale: bool = True
    lambda_out: float = 1.0
    eps: float = DEFAULT_EPS


def apply_method(ctx: MethodContext, tensors: Sequence[np.ndarray]) -> np.ndarray:
    """Dispatch one resolved merge. For base methods, tensors[0] is the base."""
    method = ctx.method
    if method == "linear":
        return linear(tensors, ctx.weights, ctx.normalize)
    if method == "slerp":
        if len(tensors) != 2:
            raise ValueError(f"slerp takes exactly two tensors, got {len(tensors)}")
        return slerp(ctx.t, tensors[0], tensors[1], ctx.eps)

    if method not in BASE_METHODS:
        raise ValueError(f"unknown merge method {method!r}")
    if not tensors:
        raise ValueError("base methods need at least the base tensor")
    base = tensors[0]
    taus = [task_vector(m, base) for m in tensors[1:]]
    if method == "task_arithmetic":
        return task_arithmetic(base, taus, ctx.weights)
    if method == "ties":
        return ties_merge(base, taus, ctx.weights, ctx.densities, ctx.lambda_out)
    if method == "dare_ties":
        ps = [1.0 - d for d in ctx.densities]
        return dare_ties_merge(base, taus, ctx.weights, ps, ctx.rescale, ctx.seeds, ctx.lambda_out)
    if method == "dare_linear":
        ps = [1.0 - d for d in ctx.densities]
        return dare_linear_merge(base, taus, ctx.weights, ps, ctx.rescale, ctx.seeds)
    if method == "breadcrumbs":
        return breadcrumbs_merge(base, taus, ctx.weights, ctx.betas, ctx.gammas)
    raise AssertionError(f"unhandled method {method!r}")
