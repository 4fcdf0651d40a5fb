"""Penalty tying normalized reconstructions to prior-label embeddings.

Kept separate so the ABAE trainer and the ensemble layer can both use it
without importing each other.
"""

from __future__ import annotations

import numpy as np

from .numerics import l2_normalize_rows, normalize_rows_backward


def _check(r: np.ndarray, rows: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r = np.asarray(r, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if r.ndim != 2 or rows.shape != r.shape or mask.shape != (r.shape[0],):
        raise ValueError(f"shape mismatch: r {r.shape}, anchors {rows.shape}, mask {mask.shape}")
    return r, rows, mask


def anchored_penalty(r: np.ndarray, rows: np.ndarray, mask: np.ndarray) -> float:
    """sum_i mask_i * (rhat_i . anchor_i - 1)^2 with rhat_i = r_i / |r_i|.

    Only the row-wise dot products (the diagonal of rhat @ anchors.T) are
    formed; off-diagonal pairs never enter.
    """
    r, rows, mask = _check(r, rows, mask)
    diag = np.einsum("bd,bd->b", l2_normalize_rows(r), rows)
    return float(np.sum(mask * (diag - 1.0) ** 2))


def anchored_penalty_grad(r: np.ndarray, rows: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Penalty value and its gradient with respect to the raw reconstructions ``r``."""
    r, rows, mask = _check(r, rows, mask)
    rhat = l2_normalize_rows(r)
    diag = np.einsum("bd,bd->b", rhat, rows)
    value = float(np.sum(mask * (diag - 1.0) ** 2))
    g_rhat = (2.0 * mask * (diag - 1.0))[:, None] * rows
    return value, normalize_rows_backward(r, g_rhat)
