"""Dense float64 kernels shared by every model in the package."""

from __future__ import annotations

import zlib
from typing import Callable, Mapping

import numpy as np

NORM_TOL = 1e-12


class ZeroNormError(ValueError):
    """Raised when a vector that must be normalized has (near) zero length."""


def as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("empty vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector has non-finite entries")
    return arr


def softmax(v) -> np.ndarray:
    v = as_vector(v)
    shifted = np.exp(v - v.max())
    return shifted / shifted.sum()


def softmax_rows(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax; masked-out entries (mask == 0) get probability 0."""
    x = np.asarray(x, dtype=np.float64)
    if mask is not None:
        x = np.where(mask > 0, x, -np.inf)
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def l2_normalize(v) -> np.ndarray:
    v = as_vector(v)
    norm = np.linalg.norm(v)
    if norm <= NORM_TOL:
        raise ZeroNormError(f"cannot normalize vector with norm {norm:g}")
    return v / norm


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms <= NORM_TOL):
        bad = np.flatnonzero(norms.reshape(-1) <= NORM_TOL)
        raise ZeroNormError(f"rows with zero norm: {bad[:10].tolist()}")
    return x / norms


def normalize_rows_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient through x -> x / |x| applied row-wise."""
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    unit = x / norms
    return (grad_out - unit * np.sum(unit * grad_out, axis=-1, keepdims=True)) / norms


def cosine(a, b) -> float:
    a = l2_normalize(a)
    b = l2_normalize(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.clip(a @ b, -1.0, 1.0))


def rbf(a, b, gamma: float) -> float:
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    diff = a - b
    return float(np.exp(-gamma * (diff @ diff)))


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the stream for a given seed is platform independent."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(seed: int, stage: str) -> int:
    """Split one top-level seed into independent per-stage seeds."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


LossFn = Callable[[Mapping[str, np.ndarray]], "tuple[float, Mapping[str, np.ndarray]]"]


def grad_check(
    loss_and_grad: LossFn,
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad(params)`` returns ``(loss, grads)`` with ``grads`` keyed like
    ``params``. The error for one coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``. When
    ``max_coords`` is set, that many coordinates are sampled per tensor.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    work = {name: np.array(p, dtype=np.float64, copy=True) for name, p in params.items()}
    base, grads = loss_and_grad(work)
    if not np.isfinite(base):
        raise FloatingPointError("loss is not finite at the base point")
    rng = make_rng(seed)
    worst = 0.0
    for name, p in work.items():
        flat = p.reshape(-1)
        analytic = np.asarray(grads[name], dtype=np.float64).reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up, _ = loss_and_grad(work)
            flat[i] = orig - eps
            down, _ = loss_and_grad(work)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"loss is not finite when perturbing {name}[{i}]")
            numeric = (up - down) / (2 * eps)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]), abs(numeric))
            worst = max(worst, err)
    return worst
