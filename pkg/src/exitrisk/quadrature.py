"""Tensor-product quadrature of piecewise-smooth integrands against a Gaussian.

The grid is laid out on the principal axes of the covariance, ``box``
standard deviations either side of the mean.  Integrands are described as a
sum of *branches*, each a smooth function times a product of indicator
conditions on a set of level functions (``level <= 0`` means "inside").
Along the innermost axis every cell is split at the linearly-interpolated
zero crossings of the levels, so indicator jumps do not cost first-order
accuracy.  Outer axes use the plain trapezoid rule; after the inner cut the
line integrals are continuous in the outer coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtr

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

DEFAULT_POINTS = {0: 1, 1: 81, 2: 81, 3: 41, 4: 21}


def default_points(dim: int) -> int:
    return DEFAULT_POINTS.get(dim, 11)


@dataclass
class GaussianGrid:
    """Nodes arranged as ``(lines, inner)``; ``nodes`` has a trailing state axis.

    For a degenerate (point-mass) measure ``lines == inner == 1`` and
    ``point`` is True.
    """

    nodes: np.ndarray
    outer_weights: np.ndarray
    inner_density: np.ndarray
    spacing: float
    point: bool

    @property
    def shape(self):
        return self.nodes.shape[:-1]


def gaussian_grid(mean, cov, points: int, box: float, rel_tol: float = 1e-12,
                  abs_tol: float = 1e-30) -> GaussianGrid:
    mean = np.asarray(mean, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    lam, vec = np.linalg.eigh(0.5 * (cov + cov.T))
    top = lam.max() if lam.size else 0.0
    keep = lam > max(abs_tol, rel_tol * top)
    if not np.any(keep):
        return GaussianGrid(mean[None, None, :], np.ones(1), np.ones(1), 1.0, True)
    order = np.argsort(-lam[keep])
    scales = np.sqrt(lam[keep][order])
    axes = vec[:, keep][:, order] * scales
    d = axes.shape[1]
    xi = np.linspace(-box, box, points)
    h = xi[1] - xi[0]
    dens = np.exp(-0.5 * xi ** 2) * _INV_SQRT_2PI
    trap = np.full(points, h)
    trap[[0, -1]] *= 0.5
    # renormalise so the box carries unit mass (constants integrate exactly)
    dens = dens / np.sum(trap * dens)
    w1 = trap * dens
    if d == 1:
        outer = np.ones(1)
        grids = [xi[None, :]]
        coords = xi[None, :, None]
    else:
        mesh = np.meshgrid(*([xi] * (d - 1)), indexing="ij")
        outer_xi = np.stack([m.ravel() for m in mesh], axis=-1)
        wmesh = np.meshgrid(*([w1] * (d - 1)), indexing="ij")
        outer = np.prod(np.stack([w.ravel() for w in wmesh], axis=-1), axis=-1)
        L = outer_xi.shape[0]
        coords = np.empty((L, points, d))
        coords[:, :, 0] = xi[None, :]
        coords[:, :, 1:] = outer_xi[:, None, :]
    nodes = mean + coords @ axes.T
    return GaussianGrid(nodes, outer, dens, h, False)


Branch = tuple  # (pred, values) or (pred, values, arg): integrand values * Phi(arg)


def _F1(x):
    return x * ndtr(x) + np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _F2(x):
    return 0.5 * ((x * x - 1.0) * ndtr(x) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI)


def _segment_phi(a, b, d0, d1, x0, x1):
    """``int_a^b d(r) Phi(x(r)) dr`` for ``d``, ``x`` linear in ``r`` on [0, 1] with end values (d0, d1), (x0, x1)."""
    xa, xb = x0 + (x1 - x0) * a, x0 + (x1 - x0) * b
    da, db = d0 + (d1 - d0) * a, d0 + (d1 - d0) * b
    width = b - a
    dx = xb - xa
    small = np.abs(dx) < 1e-3
    mid = 0.5 * (xa + xb)
    simpson = width / 6.0 * (da * ndtr(xa) + 2.0 * (da + db) * ndtr(mid) + db * ndtr(xb))
    with np.errstate(divide="ignore", invalid="ignore"):
        safe_dx = np.where(small, 1.0, dx)
        c1 = (db - da) / safe_dx
        c0 = da - c1 * xa
        exact = width / safe_dx * (c0 * (_F1(xb) - _F1(xa)) + c1 * (_F2(xb) - _F2(xa)))
    return np.where(small, simpson, exact)


def integrate(grid: GaussianGrid, levels: np.ndarray, branches: Sequence[Branch]) -> float:
    """Integrate ``sum_b pred_b(inside) * value_b`` against the grid's Gaussian.

    ``levels`` has shape ``(q, lines, inner)`` (``q`` may be zero).  Each
    branch is ``(pred, values)`` where ``pred`` maps a boolean array of shape
    ``(q, ...)`` (True where level <= 0) to a boolean array of shape ``...``
    and ``values`` has the grid shape.  An optional third element ``arg``
    (grid shape) multiplies the branch by ``Phi(arg)``; ``arg`` is taken as
    linear within each cell and that factor is integrated exactly, which
    keeps steep normal-CDF transitions narrower than a cell accurate.
    """
    levels = np.asarray(levels, dtype=float).reshape((-1,) + grid.shape)
    if grid.point:
        inside = levels[:, 0, 0] <= 0.0
        total = 0.0
        for br in branches:
            pred, v = br[0], br[1]
            f = float(ndtr(np.asarray(br[2]).reshape(-1)[0])) if len(br) > 2 else 1.0
            total += float(pred(inside[:, None])[0]) * float(v.reshape(-1)[0]) * f
        return total

    q = levels.shape[0]
    L0, L1 = levels[:, :, :-1], levels[:, :, 1:]
    if q:
        cross = (L0 <= 0.0) != (L1 <= 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(cross, L0 / (L0 - L1), 1.0)
        r = np.clip(r, 0.0, 1.0)
        bps = np.sort(r, axis=0)
        edges = np.concatenate([np.zeros((1,) + bps.shape[1:]), bps, np.ones((1,) + bps.shape[1:])], axis=0)
    else:
        edges = np.stack([np.zeros(L0.shape[1:]), np.ones(L0.shape[1:])])

    dens = grid.inner_density
    total_cells = np.zeros(edges.shape[1:])
    vals = []
    for br in branches:
        pred = br[0]
        v = np.asarray(br[1], dtype=float).reshape(grid.shape) * dens
        arg = None
        if len(br) > 2:
            x = np.asarray(br[2], dtype=float).reshape(grid.shape)
            arg = (x[:, :-1], x[:, 1:])
        vals.append((pred, v[:, :-1], v[:, 1:], arg))
    for s in range(edges.shape[0] - 1):
        a, b = edges[s], edges[s + 1]
        width = b - a
        if not np.any(width > 0):
            continue
        mid = 0.5 * (a + b)
        inside = (L0 + (L1 - L0) * mid) <= 0.0 if q else np.zeros((0,) + a.shape, dtype=bool)
        lin = 0.5 * (b * b - a * a)
        for pred, v0, v1, arg in vals:
            sel = pred(inside)
            if arg is None:
                seg = width * v0 + (v1 - v0) * lin
            else:
                seg = _segment_phi(a, b, v0, v1, arg[0], arg[1])
            total_cells += np.where(sel, seg, 0.0)
    line = total_cells.sum(axis=-1) * grid.spacing
    return float(line @ grid.outer_weights)


def conditional_gaussian(mean, cov, idx_given, idx_target):
    """Affine conditional of ``target | given``: returns ``(gain, offset_mean, cond_cov)``.

    ``E[target | given=y] = offset_mean + gain @ (y - mean_given)``.
    """
    mean = np.asarray(mean, float)
    cov = np.asarray(cov, float)
    g, t = list(idx_given), list(idx_target)
    Cgg = cov[np.ix_(g, g)]
    Ctg = cov[np.ix_(t, g)]
    Ctt = cov[np.ix_(t, t)]
    gain = Ctg @ np.linalg.pinv(Cgg, rcond=1e-12, hermitian=True)
    cond = Ctt - gain @ Ctg.T
    cond = 0.5 * (cond + cond.T)
    return gain, mean[t], cond
