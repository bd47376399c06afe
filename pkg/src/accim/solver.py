"""Fixed-point solution of the reduced MAXENT dual and density reconstruction.

With piecewise-constant test functions the dual optimality conditions are
equivalent to the fixed-point equations ``x = Psi(x)`` where, for kept
cells ``i``,

    Psi(x)_i = (alpha * (sum_j C_ij x_j + c_i) / sum_k C_ki x_k**-alpha) ** (1/(1+alpha))

and ``x_i = exp(lambda_i + lambda_0)``.  The entropy maximising density is
then piecewise constant on the refined cells ``B_k ∩ T^{-1}B_j`` (value
``nu * x_j * x_k**-alpha``) and ``H_1 ∩ B_k`` (value ``nu * x_k**-alpha``),
with ``nu`` fixed by unit total mass.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DualDivergenceError, NonConvergenceError
from .partition import OverlapData
from .reduction import ReducedProblem

__all__ = [
    "SolverConfig",
    "DualState",
    "PiecewiseDensity",
    "MaxentSolution",
    "psi_step",
    "iterate_psi",
    "solve",
    "reconstruct_density",
    "entropy",
    "dual_value_and_gradient",
    "moment_residuals",
    "survivor_mass_sequence",
    "density_at",
    "write_density_csv",
]

log = logging.getLogger(__name__)

# exp() overflows a double just above 709.78.
_MAX_EXPONENT = 700.0


@dataclass(frozen=True)
class SolverConfig:
    alpha: float
    tol: float = 1e-12
    max_iter: int = 1_000_000
    divergence_bound: float = 1e12

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if not self.tol > 0:
            raise ConfigError(f"tol must be positive, got {self.tol!r}")
        if int(self.max_iter) < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter!r}")
        if not self.divergence_bound > 1:
            raise ConfigError("divergence_bound must exceed 1")

    @property
    def escape_rate(self) -> float:
        return -float(np.log(self.alpha))


@dataclass(frozen=True)
class DualState:
    """Fixed-point iterate; sentinel value 1 on coordinates outside the reduced domain."""

    x: np.ndarray
    iterations: int
    final_delta: float


def _entries(M: sp.csr_matrix, rows, cols) -> np.ndarray:
    if len(rows) == 0:
        return np.zeros(0)
    return np.asarray(M[rows, cols]).ravel()


@dataclass(frozen=True)
class PiecewiseDensity:
    """Density constant on each survivor subcell (k, j) and each hole subcell k.

    ``survivor_values`` shares the sparsity pattern of ``survivor_weights``
    (the masses of ``B_k ∩ T^{-1}B_j``); ``hole_values`` pairs with
    ``hole_weights`` (the masses of ``H_1 ∩ B_k``).
    """

    survivor_values: sp.csr_matrix
    survivor_weights: sp.csr_matrix
    hole_values: np.ndarray
    hole_weights: np.ndarray
    normalization: float
    cell_mass: np.ndarray

    @cached_property
    def survivor_masses(self) -> sp.csr_matrix:
        return sp.csr_matrix(self.survivor_values.multiply(self.survivor_weights))

    @property
    def survivor_mass(self) -> float:
        return float(self.survivor_masses.sum())

    @property
    def total_mass(self) -> float:
        return self.survivor_mass + float(np.dot(self.hole_values, self.hole_weights))

    def mass_per_cell(self) -> np.ndarray:
        return (np.asarray(self.survivor_masses.sum(axis=1)).ravel()
                + self.hole_values * self.hole_weights)

    def cell_average(self) -> np.ndarray:
        """Mass on each grid cell divided by the cell's Lebesgue mass."""
        return self.mass_per_cell() / self.cell_mass

    def pieces(self, overlap: Optional[OverlapData] = None):
        """``(values, weights)`` over all refined pieces with positive mass.

        With ``overlap`` given, pieces of the full partition that lie outside
        the reduced domain are included with value 0.
        """
        if overlap is None:
            S = self.survivor_weights.tocoo()
            vals = _entries(self.survivor_values, S.row, S.col)
            weights = S.data
            hole = self.hole_weights > 0
            return (np.concatenate([vals, self.hole_values[hole]]),
                    np.concatenate([weights, self.hole_weights[hole]]))
        C = overlap.C.tocoo()
        vals = _entries(self.survivor_values, C.row, C.col)
        hole = overlap.c > 0
        return (np.concatenate([vals, self.hole_values[hole]]),
                np.concatenate([C.data, overlap.c[hole]]))


@dataclass(frozen=True)
class MaxentSolution:
    alpha: float
    lambda0: float
    lam: np.ndarray
    density: PiecewiseDensity
    entropy: float
    dual_value: float
    moment_residual_sup: float
    survivor_mass: float
    state: DualState
    keep: np.ndarray

    @property
    def iterations(self) -> int:
        return self.state.iterations

    @property
    def x(self) -> np.ndarray:
        return self.state.x

    def summary(self) -> dict:
        return {
            "alpha": self.alpha,
            "entropy": self.entropy,
            "neg_entropy": -self.entropy,
            "dual_value": self.dual_value,
            "survivor_mass": self.survivor_mass,
            "total_mass": self.density.total_mass,
            "residual_sup": self.moment_residual_sup,
            "iterations": self.iterations,
            "final_delta": self.state.final_delta,
            "kept_cells": int(self.keep.sum()),
        }


# --- fixed point -------------------------------------------------------------

def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not (0.0 < alpha < 1.0):
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha!r}")
    return alpha


def psi_step(x, reduced: ReducedProblem, alpha: float,
             divergence_bound: float = 1e12) -> np.ndarray:
    """One application of ``Psi``.

    Coordinates whose row and column of ``C_hat`` (and ``c_hat``) are all
    zero lie outside the reduced domain and are set to 1.

    Raises
    ------
    DualDivergenceError
        If a component exceeds ``divergence_bound`` or falls below its
        reciprocal.
    """
    alpha = _check_alpha(alpha)
    x = np.asarray(x, dtype=float)
    numer = alpha * (reduced.C_hat @ x + reduced.c_hat)
    denom = reduced.C_hat_csc.T @ np.power(x, -alpha)
    active = denom > 0
    out = np.ones_like(x)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        out[active] = np.power(numer[active] / denom[active], 1.0 / (1.0 + alpha))
    # Empty column with a nonempty row: the update is +inf (cell outside the
    # reduced domain was left in the problem).
    out[~active & (numer > 0)] = np.inf
    bad = ~((out <= divergence_bound) & (out >= 1.0 / divergence_bound))
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise DualDivergenceError(
            f"fixed-point iterate left [1/{divergence_bound:g}, {divergence_bound:g}] "
            f"at cell {i} (value {float(out[i])!r}); the dual problem is probably infeasible")
    return out


def iterate_psi(reduced: ReducedProblem, alpha: float, x0=None,
                divergence_bound: float = 1e12) -> Iterator[np.ndarray]:
    """Infinite stream ``x_0, Psi(x_0), Psi(Psi(x_0)), ...``."""
    x = np.ones(reduced.n) if x0 is None else np.asarray(x0, dtype=float).copy()
    if x.shape != (reduced.n,) or np.any(~(x > 0)):
        raise ValueError("x0 must be a positive vector with one entry per cell")
    x[~reduced.keep] = 1.0
    while True:
        yield x
        x = psi_step(x, reduced, alpha, divergence_bound)


def _run_fixed_point(reduced, config: SolverConfig, x0=None) -> DualState:
    delta = np.inf
    it = iterate_psi(reduced, config.alpha, x0, config.divergence_bound)
    x = next(it)
    for t in range(1, int(config.max_iter) + 1):
        x_new = next(it)
        delta = float(np.max(np.abs(np.log(x_new / x)))) if len(x) else 0.0
        x = x_new
        if delta <= config.tol:
            return DualState(x=x, iterations=t, final_delta=delta)
    raise NonConvergenceError(
        f"no convergence after {config.max_iter} iterations (last delta {delta:.3e})",
        last_delta=delta, iterations=int(config.max_iter))


# --- reconstruction and diagnostics -----------------------------------------

def reconstruct_density(state: DualState, reduced: ReducedProblem, alpha: float):
    """Density, ``lambda_0`` and ``lambda`` from a converged fixed point.

    Returns
    -------
    density : PiecewiseDensity
    lambda0 : float
    lam : ndarray
        ``log(x_i) - lambda0``; only meaningful on kept cells.
    """
    alpha = _check_alpha(alpha)
    x = np.asarray(state.x, dtype=float)
    x_neg = np.power(x, -alpha)
    W = reduced.C_hat.tocoo()
    surv_unnorm = x[W.col] * x_neg[W.row]
    hole_unnorm = np.where(reduced.c_hat > 0, x_neg, 0.0)
    total = float(np.dot(surv_unnorm, W.data) + np.dot(hole_unnorm, reduced.c_hat))
    if not (total > 0 and np.isfinite(total)):
        raise DualDivergenceError(f"unnormalisable density (total mass {total!r})")
    nu = 1.0 / total
    values = sp.csr_matrix((nu * surv_unnorm, (W.row, W.col)), shape=W.shape)
    density = PiecewiseDensity(
        survivor_values=values,
        survivor_weights=sp.csr_matrix(reduced.C_hat),
        hole_values=nu * hole_unnorm,
        hole_weights=np.asarray(reduced.c_hat, dtype=float),
        normalization=nu,
        cell_mass=np.asarray(reduced.overlap.cell_mass),
    )
    # nu = exp(alpha*lambda0 - 1)
    lambda0 = (np.log(nu) + 1.0) / alpha
    lam = np.log(x) - lambda0
    return density, float(lambda0), lam


def entropy(density: PiecewiseDensity) -> float:
    """``-sum v log(v) * weight`` over the pieces, with ``0 log 0 = 0``."""
    vals, weights = density.pieces()
    pos = vals > 0
    return float(-np.sum(vals[pos] * np.log(vals[pos]) * weights[pos]))


def dual_value_and_gradient(lambda0: float, lam, reduced: ReducedProblem, alpha: float):
    """Reduced dual objective and its gradient ``[d/dlambda_0, d/dlambda_1..n]``.

    ``Q = alpha*l0 - sum_kj exp(l0 - 1 + l_j - alpha l_k) C_kj
    - sum_k exp(-1 - alpha l_k) c_k``.
    """
    alpha = _check_alpha(alpha)
    lam = np.asarray(lam, dtype=float)
    n = reduced.n
    W = reduced.C_hat.tocoo()
    expo = lambda0 - 1.0 + lam[W.col] - alpha * lam[W.row]
    hole = reduced.c_hat > 0
    hole_expo = -1.0 - alpha * lam[hole]
    peak = max(expo.max(initial=-np.inf), hole_expo.max(initial=-np.inf))
    if not np.isfinite(lambda0) or not np.all(np.isfinite(lam)) or peak > _MAX_EXPONENT:
        raise DualDivergenceError(f"dual exponent {peak!r} overflows")
    e = np.exp(expo) * W.data
    h = np.zeros(n)
    h[hole] = np.exp(hole_expo) * reduced.c_hat[hole]
    value = alpha * lambda0 - e.sum() - h.sum()
    grad = np.empty(n + 1)
    grad[0] = alpha - e.sum()
    out_flow = np.bincount(W.row, weights=e, minlength=n)
    in_flow = np.bincount(W.col, weights=e, minlength=n)
    grad[1:] = alpha * out_flow - in_flow + alpha * h
    return float(value), grad


def moment_residuals(density: PiecewiseDensity, overlap: OverlapData, alpha: float) -> np.ndarray:
    """Mass flowing into each ``B_j`` minus ``alpha`` times the mass on ``B_j``."""
    V = density.survivor_values
    flow = sp.csr_matrix(V.multiply(overlap.C))
    inflow = np.asarray(flow.sum(axis=0)).ravel()
    on_cell = np.asarray(flow.sum(axis=1)).ravel() + density.hole_values * overlap.c
    return inflow - alpha * on_cell


def survivor_mass_sequence(density: PiecewiseDensity, steps: int) -> np.ndarray:
    """Total surviving mass after 0..steps applications of the discrete push-forward.

    Mass on the subcell ``B_k ∩ T^{-1}B_j`` moves to ``B_j``, mass on
    ``H_1 ∩ B_k`` escapes, and mass arriving in a cell is spread over its
    subcells in proportion to the density's own subcell masses.
    """
    per_cell = density.mass_per_cell()
    F = density.survivor_masses
    scale = np.divide(1.0, per_cell, out=np.zeros_like(per_cell), where=per_cell > 0)
    P = sp.csr_matrix(sp.diags(scale) @ F)
    q = per_cell.copy()
    out = [q.sum()]
    PT = P.T.tocsr()
    for _ in range(int(steps)):
        q = PT @ q
        out.append(q.sum())
    return np.asarray(out)


def density_at(density: PiecewiseDensity, system, partition, points) -> np.ndarray:
    """Point evaluation via the map: locate the cell, then the image cell or hole."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    k = partition.locate(pts)
    images, escaped, undefined = system.apply(pts)
    out = np.zeros(len(pts))
    lost = escaped | undefined
    out[lost] = density.hole_values[k[lost]]
    stay = ~lost
    if np.any(stay):
        j = partition.locate(images[stay])
        out[stay] = np.asarray(density.survivor_values[k[stay], j]).ravel()
    return out


# --- driver ------------------------------------------------------------------

def solve(reduced: ReducedProblem, config: SolverConfig, x0=None) -> MaxentSolution:
    """Run the fixed point from ``x0`` (default all ones) and assemble diagnostics.

    Raises
    ------
    NonConvergenceError
        After ``config.max_iter`` steps without reaching ``config.tol``.
    DualDivergenceError
        If the iterate blows up, which happens on infeasible (unreduced) data.
    """
    if reduced.kept_count < 1:
        raise ValueError("reduced problem has no kept cells")
    state = _run_fixed_point(reduced, config, x0)
    density, lambda0, lam = reconstruct_density(state, reduced, config.alpha)
    value, _ = dual_value_and_gradient(lambda0, lam, reduced, config.alpha)
    residuals = moment_residuals(density, reduced.overlap, config.alpha)
    sol = MaxentSolution(
        alpha=config.alpha,
        lambda0=lambda0,
        lam=lam,
        density=density,
        entropy=entropy(density),
        dual_value=value,
        moment_residual_sup=float(np.max(np.abs(residuals))),
        survivor_mass=density.survivor_mass,
        state=state,
        keep=reduced.keep,
    )
    log.debug("alpha=%g converged in %d iterations, H=%.12g",
              config.alpha, state.iterations, sol.entropy)
    return sol


def write_density_csv(path, solution: MaxentSolution, partition, refined: bool = False) -> None:
    """Cell-averaged density per grid cell, or one row per refined subcell.

    The cell-level file has columns ``cell_index, x0[, x1], density``; the
    refined file has ``k, j, kind, weight, density`` with ``kind`` either
    ``survivor`` or ``hole``.
    """
    dens = solution.density
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if not refined:
            centers = partition.centers
            writer.writerow(["cell_index"] + [f"x{d}" for d in range(centers.shape[1])]
                            + ["density"])
            avg = dens.cell_average()
            for k in range(len(avg)):
                writer.writerow([k] + [f"{v:.17g}" for v in centers[k]] + [f"{avg[k]:.17g}"])
            return
        writer.writerow(["k", "j", "kind", "weight", "density"])
        W = dens.survivor_weights.tocoo()
        order = np.lexsort((W.col, W.row))
        vals = np.asarray(dens.survivor_values[W.row, W.col]).ravel()
        for idx in order:
            writer.writerow([W.row[idx], W.col[idx], "survivor",
                             f"{W.data[idx]:.17g}", f"{vals[idx]:.17g}"])
        for k in np.flatnonzero(dens.hole_weights > 0):
            writer.writerow([k, "", "hole", f"{dens.hole_weights[k]:.17g}",
                             f"{dens.hole_values[k]:.17g}"])
