"""Reduced domain of the dual problem, found from the sparsity pattern of ``C``.

A cell is kept when it lies on a cycle of the overlap graph (edge ``k -> j``
wherever ``C[k, j] > 0``) or is reachable from such a cycle.  Discarded
cells carry no conditionally invariant mass, and removing them is what makes
the dual maximum attained at finite multipliers.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import EmptyReducedDomainError
from .partition import OverlapData

__all__ = [
    "ReducedProblem",
    "adjacency",
    "cyclic_nodes",
    "reduce_domain",
    "unreduced_problem",
    "reachability_oracle",
    "oracle_keep_mask",
    "bad_function_certificate",
    "write_mask_csv",
]


@dataclass(frozen=True)
class ReducedProblem:
    """Overlap data restricted to the kept cells.

    ``C_hat`` and ``c_hat`` equal ``C`` and ``c`` on kept rows/columns and are
    zero elsewhere.  ``alpha`` is left unset here; the solver takes it from
    its own config.
    """

    keep: np.ndarray
    C_hat: sp.csr_matrix
    c_hat: np.ndarray
    overlap: OverlapData
    alpha: Optional[float] = None

    @property
    def kept_count(self) -> int:
        return int(self.keep.sum())

    @property
    def n(self) -> int:
        return len(self.keep)

    @cached_property
    def C_hat_csc(self) -> sp.csc_matrix:
        return self.C_hat.tocsc()

    def as_overlap(self) -> OverlapData:
        """The reduced data as an :class:`OverlapData` (for re-reduction)."""
        return OverlapData(self.C_hat, self.c_hat, self.overlap.cell_mass,
                           partition=self.overlap.partition, backend=self.overlap.backend,
                           samples=self.overlap.samples, seed=self.overlap.seed)


def adjacency(overlap: OverlapData) -> sp.csr_matrix:
    """Boolean adjacency of the overlap graph (same pattern as ``C``)."""
    C = overlap.C
    return sp.csr_matrix((np.ones(C.nnz, dtype=bool), C.indices, C.indptr), shape=C.shape)


def cyclic_nodes(graph: sp.csr_matrix) -> np.ndarray:
    """Mask of nodes that lie on a directed cycle (self-loops included)."""
    n = graph.shape[0]
    _, labels = connected_components(graph, directed=True, connection="strong")
    sizes = np.bincount(labels, minlength=labels.max() + 1 if n else 0)
    cyclic = sizes[labels] >= 2
    cyclic |= graph.diagonal().astype(bool)
    return cyclic


def _forward_closure(graph: sp.csr_matrix, seeds: np.ndarray) -> np.ndarray:
    """All nodes reachable from ``seeds`` (seeds included), breadth first."""
    seen = seeds.copy()
    frontier = np.flatnonzero(seeds)
    indptr, indices = graph.indptr, graph.indices
    while frontier.size:
        starts, stops = indptr[frontier], indptr[frontier + 1]
        if not np.any(stops > starts):
            break
        nbrs = np.concatenate([indices[a:b] for a, b in zip(starts, stops)])
        nbrs = np.unique(nbrs[~seen[nbrs]])
        seen[nbrs] = True
        frontier = nbrs
    return seen


def _mask_problem(overlap: OverlapData, keep: np.ndarray) -> ReducedProblem:
    d = sp.diags(keep.astype(float))
    C_hat = sp.csr_matrix(d @ overlap.C @ d)
    C_hat.eliminate_zeros()
    c_hat = np.where(keep, overlap.c, 0.0)
    keep = keep.copy()
    keep.flags.writeable = False
    return ReducedProblem(keep=keep, C_hat=C_hat, c_hat=c_hat, overlap=overlap)


def reduce_domain(overlap: OverlapData) -> ReducedProblem:
    """Keep the cells on a cycle of the overlap graph and everything downstream.

    Raises
    ------
    EmptyReducedDomainError
        When the graph has no cycle, e.g. every cell escapes in one step.
    """
    graph = adjacency(overlap)
    keep = _forward_closure(graph, cyclic_nodes(graph))
    if not keep.any():
        raise EmptyReducedDomainError(
            "reduced domain is empty: the overlap graph has no cycles at this resolution")
    return _mask_problem(overlap, keep)


def unreduced_problem(overlap: OverlapData) -> ReducedProblem:
    """Keep every cell.  Test hook for exercising the infeasible dual."""
    return _mask_problem(overlap, np.ones(overlap.n, dtype=bool))


# --- brute-force checks (small n only) -------------------------------------

def _reachability_matrix(overlap: OverlapData) -> np.ndarray:
    """``R[k, j]`` true iff some power ``1..n`` of the adjacency is nonzero at (k, j)."""
    n = overlap.n
    if n > 200:
        raise ValueError("the dense reachability oracle is limited to n <= 200")
    A = (overlap.C.toarray() > 0).astype(np.int64)
    R = np.zeros((n, n), dtype=bool)
    P = np.eye(n, dtype=np.int64)
    for _ in range(n):
        P = ((P @ A) > 0).astype(np.int64)
        R |= P.astype(bool)
    return R


def reachability_oracle(overlap: OverlapData, k: int, j: int) -> bool:
    """Whether ``(C^p)[k, j] > 0`` for some ``1 <= p <= n``, by dense powers."""
    return bool(_reachability_matrix(overlap)[k, j])


def oracle_keep_mask(overlap: OverlapData) -> np.ndarray:
    """Kept cells by the literal criterion ``k~>k or exists i: i~>i and i~>k``."""
    R = _reachability_matrix(overlap)
    loops = np.diag(R)
    return loops | (R[loops].any(axis=0) if loops.any() else np.zeros(overlap.n, dtype=bool))


def bad_function_certificate(overlap: OverlapData, keep: np.ndarray, alpha: float):
    """Multipliers whose dual image is <= 0 and supported exactly on dropped cells.

    Sets ``lam[k] = (alpha/2)**N(k)`` on dropped cells, where ``N(k)`` is the
    longest path length into ``k``, and zero on kept cells (``lam_0 = 0``).

    Returns
    -------
    lam : ndarray
        The certificate on cells ``1..n``.
    survivor_values : csr_matrix
        Value ``lam_j - alpha*lam_k`` on each subcell ``(k, j)`` with ``C > 0``.
    hole_values : ndarray
        Value ``-alpha*lam_k`` on each hole subcell with ``c > 0``.
    """
    n = overlap.n
    A = (overlap.C.toarray() > 0).astype(np.int64)
    longest = np.zeros(n, dtype=np.int64)
    P = np.eye(n, dtype=np.int64)
    for p in range(1, n + 1):
        P = ((P @ A) > 0).astype(np.int64)
        hit = P.any(axis=0)
        longest[hit] = p
    lam = np.where(keep, 0.0, (alpha / 2.0) ** longest.astype(float))
    C = overlap.C.tocoo()
    survivor = sp.csr_matrix((lam[C.col] - alpha * lam[C.row], (C.row, C.col)), shape=(n, n))
    hole = np.where(overlap.c > 0, -alpha * lam, 0.0)
    return lam, survivor, hole


def write_mask_csv(path, reduced: ReducedProblem) -> None:
    """One row per cell: flat index, multi-index columns, kept flag (0/1)."""
    part = reduced.overlap.partition
    dims = part.dimension if part is not None else 1
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_index"] + [f"i{d}" for d in range(dims)] + ["kept"])
        if part is not None:
            multi = np.stack(part.multi_index(np.arange(reduced.n)), axis=1)
        else:
            multi = np.arange(reduced.n)[:, None]
        for k in range(reduced.n):
            writer.writerow([k, *multi[k].tolist(), int(reduced.keep[k])])
