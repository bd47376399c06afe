"""Uniform grid partitions and the overlap data ``C``, ``c`` of a map.

For a partition ``B_1..B_n`` of the domain, ``C[k, j]`` is the Lebesgue mass
of ``B_k`` that the map sends into ``B_j`` and ``c[k]`` is the mass of ``B_k``
that escapes in one step.  These are the only dynamical inputs the dual
solver needs; they coincide with the data behind Ulam's transition matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import CacheFormatError, ConfigError
from .system import DomainBox, OpenSystem, branch_preimage_interval

__all__ = [
    "GridPartition",
    "OverlapData",
    "build_partition",
    "compute_overlap",
    "geometric_hole_vector",
    "save_overlap",
    "load_overlap",
    "read_overlap_header",
]

# Entries smaller than this fraction of the cell mass are rounding artifacts.
DROP_RTOL = 1e-15
# 1-D interval overlaps shorter than this fraction of the cell width are
# treated as touching endpoints.
_EDGE_RTOL = 1e-12

_CACHE_MAGIC = "accim-overlap 1"


@dataclass(frozen=True)
class GridPartition:
    """Row-major uniform grid of ``prod(resolution)`` cells on ``domain``."""

    domain: DomainBox
    resolution: tuple

    def __post_init__(self):
        res = tuple(int(r) for r in np.atleast_1d(self.resolution))
        if len(res) != self.domain.dimension:
            raise ConfigError(
                f"resolution {res} does not match domain dimension {self.domain.dimension}")
        if any(r < 1 for r in res):
            raise ConfigError(f"resolution counts must be >= 1, got {res}")
        object.__setattr__(self, "resolution", res)

    @property
    def n(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def dimension(self) -> int:
        return self.domain.dimension

    @cached_property
    def edges(self) -> tuple:
        """Per-axis cell edges; end points equal the domain bounds exactly."""
        return tuple(
            np.linspace(lo, hi, m + 1)
            for lo, hi, m in zip(self.domain.lower, self.domain.upper, self.resolution)
        )

    @cached_property
    def widths(self) -> tuple:
        return tuple(np.diff(e) for e in self.edges)

    @cached_property
    def cell_mass(self) -> np.ndarray:
        mass = self.widths[0]
        for w in self.widths[1:]:
            mass = np.multiply.outer(mass, w)
        return np.ascontiguousarray(mass, dtype=float).ravel()

    @cached_property
    def centers(self) -> np.ndarray:
        """``(n, dim)`` array of cell centres in flat-index order."""
        mids = [0.5 * (e[:-1] + e[1:]) for e in self.edges]
        grids = np.meshgrid(*mids, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def multi_index(self, k) -> tuple:
        return np.unravel_index(k, self.resolution)

    def flat_index(self, multi) -> np.ndarray:
        return np.ravel_multi_index(tuple(multi), self.resolution)

    def cell_box(self, k: int) -> DomainBox:
        idx = self.multi_index(int(k))
        lo = [self.edges[d][i] for d, i in enumerate(idx)]
        hi = [self.edges[d][i + 1] for d, i in enumerate(idx)]
        return DomainBox(lo, hi)

    def locate(self, points) -> np.ndarray:
        """Flat cell index of each point (points must lie in the domain)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        axes = []
        for d, e in enumerate(self.edges):
            i = np.searchsorted(e, pts[:, d], side="right") - 1
            axes.append(np.clip(i, 0, self.resolution[d] - 1))
        return np.ravel_multi_index(tuple(axes), self.resolution)


def build_partition(domain: DomainBox, resolution) -> GridPartition:
    """Uniform grid on ``domain``; ``resolution`` is an int or per-axis counts."""
    res = np.atleast_1d(np.asarray(resolution))
    if res.size == 1 and domain.dimension > 1:
        res = np.repeat(res, domain.dimension)
    if not np.all(np.equal(np.mod(res, 1), 0)):
        raise ConfigError(f"resolution must be integral, got {resolution!r}")
    return GridPartition(domain, tuple(int(r) for r in res))


@dataclass(frozen=True)
class OverlapData:
    """Sparse overlap matrix ``C``, hole vector ``c`` and cell masses.

    ``backend`` is ``"exact"`` or ``"sampled"``; for the latter ``samples``
    (effective points per cell), ``seed`` and ``undefined_count`` (points
    that fell in no branch and were counted as escaped) are recorded.
    """

    C: sp.csr_matrix
    c: np.ndarray
    cell_mass: np.ndarray
    partition: Optional[GridPartition] = None
    backend: str = "exact"
    samples: int = 0
    seed: Optional[int] = None
    undefined_count: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        C = sp.csr_matrix(self.C, dtype=float)
        C.sum_duplicates()
        C.eliminate_zeros()
        C.sort_indices()
        n = C.shape[0]
        if C.shape != (n, n):
            raise ValueError("C must be square")
        c = np.asarray(self.c, dtype=float).reshape(-1).copy()
        mass = np.asarray(self.cell_mass, dtype=float).reshape(-1).copy()
        if c.shape != (n,) or mass.shape != (n,):
            raise ValueError("c and cell_mass must have one entry per cell")
        if np.any(C.data < 0) or np.any(c < 0) or np.any(mass <= 0):
            raise ValueError("overlap data must be nonnegative with positive cell masses")
        c.flags.writeable = False
        mass.flags.writeable = False
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "cell_mass", mass)

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @cached_property
    def C_csc(self) -> sp.csc_matrix:
        """Column-oriented copy of ``C`` for column sums."""
        return self.C.tocsc()

    def row_residual(self) -> np.ndarray:
        """``sum_j C[k, j] + c[k] - cell_mass[k]`` for every row."""
        return np.asarray(self.C.sum(axis=1)).ravel() + self.c - self.cell_mass

    @classmethod
    def from_dense(cls, C, c, cell_mass=None, **kwargs) -> "OverlapData":
        """Wrap hand-built arrays (``cell_mass`` defaults to the row identity)."""
        C = np.asarray(C, dtype=float)
        c = np.asarray(c, dtype=float)
        if cell_mass is None:
            cell_mass = C.sum(axis=1) + c
        return cls(sp.csr_matrix(C), c, cell_mass, **kwargs)


def _interval_overlap_matrix(edges, widths, lo, hi, slope, offset) -> sp.csr_matrix:
    """1-D matrix of lengths ``|cell_k ∩ [lo, hi] ∩ f^{-1}(cell_j)|``."""
    m = len(edges) - 1
    pre_lo, pre_hi = branch_preimage_interval(lo, hi, slope, offset, edges[:-1], edges[1:])
    rows, cols, vals = [], [], []
    for j in np.flatnonzero(pre_hi > pre_lo):
        a, b = pre_lo[j], pre_hi[j]
        k0 = max(int(np.searchsorted(edges, a, side="right")) - 1, 0)
        k1 = min(int(np.searchsorted(edges, b, side="left")), m)
        ks = np.arange(k0, k1)
        length = np.minimum(edges[ks + 1], b) - np.maximum(edges[ks], a)
        keep = length > _EDGE_RTOL * widths[ks]
        rows.append(ks[keep])
        cols.append(np.full(int(keep.sum()), j))
        vals.append(length[keep])
    if not rows:
        return sp.csr_matrix((m, m))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m))


def _interval_lengths(edges, widths, lo, hi) -> np.ndarray:
    """Length of each cell's intersection with ``[lo, hi]``."""
    length = np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, None)
    length[length <= _EDGE_RTOL * widths] = 0.0
    return length


def _outer_flat(vectors) -> np.ndarray:
    out = vectors[0]
    for v in vectors[1:]:
        out = np.multiply.outer(out, v)
    return np.asarray(out).ravel()


def _exact_overlap(system: OpenSystem, partition: GridPartition) -> sp.csr_matrix:
    n = partition.n
    total = sp.csr_matrix((n, n))
    for br in system.branches:
        factors = [
            _interval_overlap_matrix(
                partition.edges[d], partition.widths[d],
                br.domain.lower[d], br.domain.upper[d], br.slopes[d], br.offsets[d])
            for d in range(partition.dimension)
        ]
        # Row-major flat indexing makes the product box overlap a Kronecker product.
        block = factors[0]
        for f in factors[1:]:
            block = sp.kron(block, f, format="csr")
        total = total + block
    return sp.csr_matrix(total)


def _drop_small(C: sp.csr_matrix, cell_mass: np.ndarray) -> sp.csr_matrix:
    C = C.tocsr(copy=True)
    row_of = np.repeat(np.arange(C.shape[0]), np.diff(C.indptr))
    C.data[C.data < DROP_RTOL * cell_mass[row_of]] = 0.0
    C.eliminate_zeros()
    return C


def _sampled_overlap(system, partition, samples_per_cell, seed, chunk_points=2_000_000):
    dim = partition.dimension
    per_axis = max(1, int(round(samples_per_cell ** (1.0 / dim))))
    s = per_axis ** dim
    rng = np.random.default_rng(seed)
    n = partition.n
    # Stratum offsets inside the unit cell, jittered uniformly per sample.
    strata = np.stack(
        [g.ravel() for g in np.meshgrid(*[np.arange(per_axis)] * dim, indexing="ij")], axis=1)
    lowers = np.stack(
        [partition.edges[d][np.asarray(partition.multi_index(np.arange(n))[d])] for d in range(dim)],
        axis=1)
    cell_widths = np.stack(
        [partition.widths[d][np.asarray(partition.multi_index(np.arange(n))[d])] for d in range(dim)],
        axis=1)
    cells_per_chunk = max(1, chunk_points // s)
    rows, cols, counts = [], [], []
    escaped_counts = np.zeros(n, dtype=np.int64)
    undefined_total = 0
    for start in range(0, n, cells_per_chunk):
        ks = np.arange(start, min(n, start + cells_per_chunk))
        jitter = rng.random((len(ks), s, dim))
        unit = (strata[None, :, :] + jitter) / per_axis
        pts = lowers[ks, None, :] + unit * cell_widths[ks, None, :]
        pts = pts.reshape(-1, dim)
        owner_cell = np.repeat(ks, s)
        images, escaped, undefined = system.apply(pts)
        lost = escaped | undefined
        undefined_total += int(undefined.sum())
        escaped_counts += np.bincount(owner_cell[lost], minlength=n)
        stay = ~lost
        target = partition.locate(images[stay])
        rows.append(owner_cell[stay])
        cols.append(target)
        counts.append(np.ones(len(target)))
    counts_mat = sp.coo_matrix(
        (np.concatenate(counts), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n)).tocsr()
    counts_mat.sum_duplicates()
    mass = partition.cell_mass
    scale = mass / s
    C = sp.diags(scale) @ counts_mat
    c = escaped_counts * scale
    return sp.csr_matrix(C), c, s, undefined_total


def compute_overlap(system: OpenSystem, partition: GridPartition, backend: str = "exact",
                    samples_per_cell: int = 1000, seed: Optional[int] = 0) -> OverlapData:
    """Overlap matrix and hole vector of ``system`` on ``partition``.

    Parameters
    ----------
    backend : {"exact", "sampled"}
        ``exact`` intersects preimage boxes branch by branch.  ``sampled``
        draws ``samples_per_cell`` stratified, jittered points per cell
        (rounded to a perfect power in 2-D) and counts where they land.
    seed : int, optional
        Seed of the sampling generator; the sampled result is a
        deterministic function of it.
    """
    if system.domain != partition.domain:
        raise ValueError("partition domain must equal the system domain")
    mass = partition.cell_mass
    if backend == "exact":
        C = _drop_small(_exact_overlap(system, partition), mass)
        c = mass - np.asarray(C.sum(axis=1)).ravel()
        c[c < DROP_RTOL * mass] = 0.0
        return OverlapData(C, c, mass, partition=partition, backend="exact")
    if backend == "sampled":
        if int(samples_per_cell) < 1:
            raise ConfigError("samples_per_cell must be >= 1")
        C, c, s, undefined = _sampled_overlap(system, partition, int(samples_per_cell), seed)
        return OverlapData(C, c, mass, partition=partition, backend="sampled",
                           samples=s, seed=seed, undefined_count=undefined)
    raise ConfigError(f"unknown overlap backend {backend!r}")


def geometric_hole_vector(system: OpenSystem, partition: GridPartition) -> np.ndarray:
    """``c[k] = m(H_1 ∩ B_k)`` computed directly from the escape geometry.

    Independent of ``compute_overlap``'s row-residual construction; used to
    cross-check it.
    """
    c = np.zeros(partition.n)
    dom = system.domain
    for br in system.branches:
        in_branch, surviving = [], []
        for d in range(partition.dimension):
            e, w = partition.edges[d], partition.widths[d]
            lo, hi = br.domain.lower[d], br.domain.upper[d]
            in_branch.append(_interval_lengths(e, w, lo, hi))
            pre_lo, pre_hi = branch_preimage_interval(
                lo, hi, br.slopes[d], br.offsets[d], dom.lower[d], dom.upper[d])
            surviving.append(_interval_lengths(e, w, pre_lo, pre_hi))
        c += _outer_flat(in_branch) - _outer_flat(surviving)
    return np.clip(c, 0.0, None)


# --- sparse triplet cache ---------------------------------------------------

def save_overlap(path, overlap: OverlapData, meta: Optional[dict] = None) -> None:
    """Write ``overlap`` as a plain-text sparse triplet file.

    Layout: ``key value`` header lines, then ``nnz`` lines ``k j value``,
    then the ``c`` and ``cell_mass`` vectors, then ``end``.  Values use 17
    significant digits so a reload is bitwise identical.
    """
    meta = dict(overlap.meta if meta is None else meta)
    part = overlap.partition
    C = overlap.C.tocoo()
    lines = [
        _CACHE_MAGIC,
        f"n {overlap.n}",
        f"backend {overlap.backend}",
        f"samples {overlap.samples}",
        f"seed {'none' if overlap.seed is None else overlap.seed}",
        f"undefined_count {overlap.undefined_count}",
    ]
    if part is not None:
        lines.append("resolution " + " ".join(str(r) for r in part.resolution))
        lines.append("domain_lower " + " ".join(f"{v:.17g}" for v in part.domain.lower))
        lines.append("domain_upper " + " ".join(f"{v:.17g}" for v in part.domain.upper))
    for key in sorted(meta):
        value = str(meta[key])
        if not value or any(ch.isspace() for ch in value):
            raise ValueError(f"meta value for {key!r} must be a non-empty token")
        lines.append(f"meta.{key} {value}")
    lines.append(f"nnz {C.nnz}")
    order = np.lexsort((C.col, C.row))
    lines.extend(f"{k} {j} {v:.17g}" for k, j, v in zip(C.row[order], C.col[order], C.data[order]))
    lines.append("c")
    lines.extend(f"{v:.17g}" for v in overlap.c)
    lines.append("cell_mass")
    lines.extend(f"{v:.17g}" for v in overlap.cell_mass)
    lines.append("end")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)


def read_overlap_header(path) -> dict:
    """Header fields of a cache file, without parsing the body."""
    header = {}
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if first != _CACHE_MAGIC:
            raise CacheFormatError(f"{path}: not an overlap cache (bad magic line)")
        for lineno, line in enumerate(fh, start=2):
            key, _, value = line.rstrip("\n").partition(" ")
            header[key] = value
            if key == "nnz":
                break
        else:
            raise CacheFormatError(f"{path}: header ends before 'nnz' (line {lineno})")
    return header


def load_overlap(path) -> OverlapData:
    """Inverse of :func:`save_overlap`; raises :class:`CacheFormatError`."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CacheFormatError(f"{path}: unreadable ({exc})") from None
    lines = text.splitlines()
    if not lines or lines[0] != _CACHE_MAGIC:
        raise CacheFormatError(f"{path}: not an overlap cache (bad magic line)")
    try:
        header, pos = {}, 1
        while True:
            key, _, value = lines[pos].partition(" ")
            header[key] = value
            pos += 1
            if key == "nnz":
                break
        n, nnz = int(header["n"]), int(header["nnz"])
        trip = np.array([lines[pos + i].split() for i in range(nnz)], dtype=float).reshape(nnz, 3)
        pos += nnz
        if lines[pos] != "c":
            raise CacheFormatError(f"{path}: expected 'c' at line {pos + 1}")
        c = np.array(lines[pos + 1:pos + 1 + n], dtype=float)
        pos += 1 + n
        if lines[pos] != "cell_mass":
            raise CacheFormatError(f"{path}: expected 'cell_mass' at line {pos + 1}")
        mass = np.array(lines[pos + 1:pos + 1 + n], dtype=float)
        pos += 1 + n
        if lines[pos] != "end" or len(c) != n or len(mass) != n:
            raise CacheFormatError(f"{path}: truncated or malformed body near line {pos + 1}")
        C = sp.csr_matrix(
            (trip[:, 2], (trip[:, 0].astype(np.int64), trip[:, 1].astype(np.int64))), shape=(n, n))
        partition = None
        if "resolution" in header:
            domain = DomainBox([float(v) for v in header["domain_lower"].split()],
                               [float(v) for v in header["domain_upper"].split()])
            partition = GridPartition(domain, tuple(int(v) for v in header["resolution"].split()))
        seed = None if header.get("seed", "none") == "none" else int(header["seed"])
        meta = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
        return OverlapData(C, c, mass, partition=partition, backend=header["backend"],
                           samples=int(header.get("samples", 0)), seed=seed,
                           undefined_count=int(header.get("undefined_count", 0)), meta=meta)
    except CacheFormatError:
        raise
    except (IndexError, KeyError, ValueError) as exc:
        raise CacheFormatError(f"{path}: malformed cache ({exc})") from None

