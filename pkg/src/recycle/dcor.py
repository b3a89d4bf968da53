"""Empirical distance correlation between feature batches.

For row matrices X (n x d_x) and Y (n x d_y) with pairwise Euclidean
distance matrices a and b, double-center each (subtract row means, column
means, add the grand mean) to get A and B; the statistic is

    <A, B> / sqrt(<A, A> <B, B>)

with <.,.> the elementwise inner product. It lies in [0, 1], is defined for
arguments of different widths, and is differentiable in both. Distance
matrices and the centering accumulate in float64 regardless of input dtype;
a degenerate batch (zero distance variance on either side) yields 0 and a
flag instead of an error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Floor inside the radical of the normalizer; keeps the backward pass finite
# when a batch is nearly degenerate.
_RADICAL_FLOOR = 1e-12


@dataclass
class CenteredDistanceMatrix:
    """Double-centered distance matrix: symmetric, rows and columns sum to ~0."""

    n: int
    entries: np.ndarray


def pairwise_dist_matrix(x: np.ndarray) -> np.ndarray:
    """Symmetric zero-diagonal matrix of Euclidean distances between rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D row matrix, got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 rows, got {n}")
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    d = np.sqrt(d2)
    np.fill_diagonal(d, 0.0)
    return (d + d.T) / 2.0


def double_center(d: np.ndarray) -> CenteredDistanceMatrix:
    """Subtract row and column means, add back the grand mean."""
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {d.shape}")
    row = d.mean(axis=1, keepdims=True)
    col = d.mean(axis=0, keepdims=True)
    grand = d.mean()
    return CenteredDistanceMatrix(n=d.shape[0], entries=d - row - col + grand)


def _center_adjoint(g: np.ndarray) -> np.ndarray:
    # Double-centering is a symmetric projection, so it is its own adjoint.
    return double_center(g).entries


def _dist_backward(g: np.ndarray, x: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """Pull a gradient on the distance matrix back to the row matrix."""
    safe = np.where(dist > 0.0, dist, 1.0)
    w = (g + g.T) / safe
    np.fill_diagonal(w, 0.0)
    return w.sum(axis=1)[:, None] * x - w @ x


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v)


def dcor(x, y, return_degenerate: bool = False):
    """Distance correlation of two equal-length batches (tensors or arrays).

    Returns a scalar tensor; when either batch has zero distance variance
    the value is 0 and the degenerate flag is set. Gradients flow to any
    tensor argument that requires them.
    """
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=np.asarray(x).dtype)
    yt = y if isinstance(y, Tensor) else Tensor(np.asarray(y), dtype=np.asarray(y).dtype)
    xd = xt.data.astype(np.float64, copy=False)
    yd = yt.data.astype(np.float64, copy=False)
    if xd.shape[0] != yd.shape[0]:
        raise ValueError(
            f"batch sizes differ: {xd.shape[0]} vs {yd.shape[0]}")
    out_dtype = np.result_type(xt.dtype, yt.dtype)

    da = pairwise_dist_matrix(xd)
    db = pairwise_dist_matrix(yd)
    a = double_center(da).entries
    b = double_center(db).entries
    s_ab = float(np.sum(a * b))
    s_aa = float(np.sum(a * a))
    s_bb = float(np.sum(b * b))
    degenerate = s_aa <= 0.0 or s_bb <= 0.0
    if degenerate:
        value = 0.0
    else:
        value = s_ab / np.sqrt(max(s_aa * s_bb, _RADICAL_FLOOR))

    out_data = np.asarray(value, dtype=out_dtype)
    graph = ad.active_graph()
    needs = graph is not None and (xt.requires_grad or yt.requires_grad) and not degenerate
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        denom = np.sqrt(max(s_aa * s_bb, _RADICAL_FLOOR))

        def vjp(g):
            g0 = float(np.asarray(g).reshape(-1)[0])
            gx = gy = None
            if xt.requires_grad:
                da_grad = _center_adjoint(b / denom - (value / s_aa) * a) * g0
                gx = _dist_backward(da_grad, xd, da).astype(xt.dtype, copy=False)
            if yt.requires_grad:
                db_grad = _center_adjoint(a / denom - (value / s_bb) * b) * g0
                gy = _dist_backward(db_grad, yd, db).astype(yt.dtype, copy=False)
            return gx, gy

        graph.record(out, (xt, yt), vjp)
    if return_degenerate:
        return out, degenerate
    return out


def dc_loss_sum(source_feats, target_feat, sigma: float,
                return_degenerate: bool = False):
    """Trade-off-weighted sum of distance correlations against each source.

    ``sigma * sum_n dcor(source_n, target)`` accumulated in source order.
    Source batches are treated as constants; gradients reach the target
    features only.
    """
    target_n = _as_array(target_feat).shape[0]
    for i, sf in enumerate(source_feats):
        if _as_array(sf).shape[0] != target_n:
            raise ValueError(
                f"source batch {i} has {_as_array(sf).shape[0]} rows, target has {target_n}")
    n_degenerate = 0
    if sigma == 0.0 or not source_feats:
        total = Tensor(np.asarray(0.0, dtype=np.float32))
    else:
        total = None
        for sf in source_feats:
            term, degen = dcor(_as_array(sf), target_feat, return_degenerate=True)
            n_degenerate += int(degen)
            total = term if total is None else ad.add(total, term)
        total = ad.scale(total, float(sigma))
    if return_degenerate:
        return total, n_degenerate
    return total
