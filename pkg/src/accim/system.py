"""Open dynamical systems given as piecewise diagonal-affine maps on boxes.

A system is a domain box ``A`` together with a finite list of branches.
Each branch acts on its own sub-box by ``p -> slopes * p + offsets``
(per-coordinate, so a diagonal linear part).  Orbits escape when the image
leaves ``A``.  Because every branch is diagonal-affine, the preimage of an
axis-aligned box under a branch is again an axis-aligned box, which keeps
the overlap masses used downstream free of quadrature error.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, UndefinedPointError

__all__ = [
    "DomainBox",
    "AffineBranch",
    "OpenSystem",
    "evaluate",
    "branch_preimage_box",
    "tent3",
    "saddle",
    "identity",
    "BUILTIN_MAPS",
    "builtin_system",
    "system_from_dict",
]

_COVERAGE_TOL = 1e-12


def _as_float_tuple(values) -> tuple:
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.ndim != 1:
        raise ValueError("expected a flat vector of coordinates")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class DomainBox:
    """Closed axis-aligned box ``[lower_0, upper_0] x ... x [lower_d, upper_d]``."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lower = _as_float_tuple(self.lower)
        upper = _as_float_tuple(self.upper)
        if len(lower) != len(upper):
            raise ValueError("lower and upper must have the same length")
        if len(lower) not in (1, 2):
            raise ValueError("only dimension 1 or 2 is supported")
        if not all(np.isfinite(lower + upper)):
            raise ValueError("box bounds must be finite")
        if any(lo >= hi for lo, hi in zip(lower, upper)):
            raise ValueError(f"degenerate box: lower={lower}, upper={upper}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dimension(self) -> int:
        return len(self.lower)

    @property
    def widths(self) -> np.ndarray:
        return np.asarray(self.upper) - np.asarray(self.lower)

    @property
    def measure(self) -> float:
        return float(np.prod(self.widths))

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        """Boolean mask of which rows of ``points`` lie in the closed box."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        lo = np.asarray(self.lower) - tol
        hi = np.asarray(self.upper) + tol
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def intersect(self, other: "DomainBox") -> Optional["DomainBox"]:
        """Intersection box, or ``None`` when it has zero measure."""
        lo = np.maximum(self.lower, other.lower)
        hi = np.minimum(self.upper, other.upper)
        if np.any(hi <= lo):
            return None
        return DomainBox(lo, hi)


@dataclass(frozen=True)
class AffineBranch:
    """One branch ``p -> slopes * p + offsets`` acting on ``domain``."""

    domain: DomainBox
    slopes: tuple
    offsets: tuple

    def __post_init__(self):
        slopes = _as_float_tuple(self.slopes)
        offsets = _as_float_tuple(self.offsets)
        d = self.domain.dimension
        if len(slopes) != d or len(offsets) != d:
            raise ValueError("slopes and offsets must match the branch dimension")
        if any(s == 0.0 or not np.isfinite(s) for s in slopes):
            raise ValueError("every slope must be finite and nonzero")
        if not all(np.isfinite(offsets)):
            raise ValueError("offsets must be finite")
        object.__setattr__(self, "slopes", slopes)
        object.__setattr__(self, "offsets", offsets)

    def apply(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts * np.asarray(self.slopes) + np.asarray(self.offsets)


@dataclass(frozen=True)
class OpenSystem:
    """A map on ``domain`` given by non-overlapping branches covering it.

    Lebesgue measure on ``domain`` is the reference measure throughout.
    """

    domain: DomainBox
    branches: tuple
    name: str = "custom"

    def __post_init__(self):
        branches = tuple(self.branches)
        if not branches:
            raise ValueError("a system needs at least one branch")
        object.__setattr__(self, "branches", branches)
        d = self.domain.dimension
        covered = 0.0
        for idx, br in enumerate(branches):
            if br.domain.dimension != d:
                raise ValueError(f"branch {idx} has the wrong dimension")
            if not (np.all(np.asarray(br.domain.lower) >= np.asarray(self.domain.lower))
                    and np.all(np.asarray(br.domain.upper) <= np.asarray(self.domain.upper))):
                raise ValueError(f"branch {idx} domain is not contained in the system domain")
            covered += br.domain.measure
        for (i, a), (j, b) in itertools.combinations(enumerate(branches), 2):
            if a.domain.intersect(b.domain) is not None:
                raise ValueError(f"branch domains {i} and {j} overlap in positive measure")
        if abs(covered - self.domain.measure) > _COVERAGE_TOL * max(1.0, self.domain.measure):
            raise ValueError(
                f"branch domains cover measure {covered!r}, domain has {self.domain.measure!r}")

    @property
    def dimension(self) -> int:
        return self.domain.dimension

    def locate(self, points) -> np.ndarray:
        """Index of the lowest-index branch containing each point, ``-1`` if none."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        owner = np.full(len(pts), -1, dtype=np.int64)
        for idx in range(len(self.branches) - 1, -1, -1):
            owner[self.branches[idx].domain.contains(pts)] = idx
        return owner

    def apply(self, points):
        """Vectorised map.

        Returns ``(images, escaped, undefined)`` where undefined points have
        NaN images and are flagged separately from escaped ones.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        owner = self.locate(pts)
        images = np.full_like(pts, np.nan)
        for idx, br in enumerate(self.branches):
            sel = owner == idx
            if np.any(sel):
                images[sel] = br.apply(pts[sel])
        undefined = owner < 0
        escaped = ~undefined & ~self.domain.contains(np.where(undefined[:, None], 0.0, images))
        return images, escaped, undefined

    def to_dict(self) -> dict:
        return {
            "domain": {"lower": list(self.domain.lower), "upper": list(self.domain.upper)},
            "branches": [
                {
                    "lower": list(br.domain.lower),
                    "upper": list(br.domain.upper),
                    "slopes": list(br.slopes),
                    "offsets": list(br.offsets),
                }
                for br in self.branches
            ],
        }

    def fingerprint(self) -> str:
        """Stable hash of the map geometry (used to key overlap caches)."""
        payload = json.dumps(self.to_dict(), sort_keys=True, default=repr)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def evaluate(system: OpenSystem, point):
    """Image of a single point and whether it escaped the domain.

    Raises
    ------
    UndefinedPointError
        If ``point`` lies in no branch domain.
    """
    pt = np.asarray(point, dtype=float).reshape(1, -1)
    if pt.shape[1] != system.dimension:
        raise ValueError(f"point must have {system.dimension} coordinates")
    images, escaped, undefined = system.apply(pt)
    if undefined[0]:
        raise UndefinedPointError(f"point {pt[0].tolist()} is outside every branch domain")
    return images[0], bool(escaped[0])


def branch_preimage_interval(lo, hi, slope, offset, target_lo, target_hi):
    """1-D preimage of ``[target_lo, target_hi]`` under ``x -> slope*x + offset``
    restricted to ``[lo, hi]``.  Works elementwise on arrays; empty results
    come back with ``upper <= lower``."""
    a = (np.asarray(target_lo, dtype=float) - offset) / slope
    b = (np.asarray(target_hi, dtype=float) - offset) / slope
    pre_lo = np.maximum(np.minimum(a, b), lo)
    pre_hi = np.minimum(np.maximum(a, b), hi)
    return pre_lo, pre_hi


def branch_preimage_box(branch: AffineBranch, target: DomainBox) -> Optional[DomainBox]:
    """The box ``{p in branch.domain : branch(p) in target}``, or ``None`` if null."""
    if target.dimension != branch.domain.dimension:
        raise ValueError("target dimension does not match the branch")
    lo, hi = branch_preimage_interval(
        np.asarray(branch.domain.lower), np.asarray(branch.domain.upper),
        np.asarray(branch.slopes), np.asarray(branch.offsets),
        np.asarray(target.lower), np.asarray(target.upper))
    if np.any(hi <= lo):
        return None
    return DomainBox(lo, hi)


# --- built-in catalog -------------------------------------------------------

def tent3() -> OpenSystem:
    """Slope-3 tent map on [0, 1]; the middle third escapes in one step."""
    left = DomainBox((0.0,), (0.5,))
    right = DomainBox((0.5,), (1.0,))
    return OpenSystem(
        DomainBox((0.0,), (1.0,)),
        (AffineBranch(left, (3.0,), (0.0,)), AffineBranch(right, (-3.0,), (3.0,))),
        name="tent3",
    )


def saddle() -> OpenSystem:
    """Linear saddle ``(x, y) -> (2x, 0.8y)`` on [-1, 1]^2."""
    box = DomainBox((-1.0, -1.0), (1.0, 1.0))
    return OpenSystem(box, (AffineBranch(box, (2.0, 0.8), (0.0, 0.0)),), name="saddle")


def identity() -> OpenSystem:
    """Identity on [0, 1] (closed system, nothing escapes)."""
    box = DomainBox((0.0,), (1.0,))
    return OpenSystem(box, (AffineBranch(box, (1.0,), (0.0,)),), name="identity")


BUILTIN_MAPS = {"tent3": tent3, "saddle": saddle, "identity": identity}


def builtin_system(name: str) -> OpenSystem:
    try:
        return BUILTIN_MAPS[name]()
    except KeyError:
        raise ConfigError(
            f"unknown map {name!r}; built-in maps are {sorted(BUILTIN_MAPS)}") from None


def system_from_dict(data: dict, name: str = "custom") -> OpenSystem:
    """Build a system from the config schema::

        {"domain": {"lower": [...], "upper": [...]},
         "branches": [{"lower": [...], "upper": [...],
                       "slopes": [...], "offsets": [...]}, ...]}
    """
    if not isinstance(data, dict):
        raise ConfigError("map: expected a mapping with 'domain' and 'branches'")
    try:
        dom = data["domain"]
        domain = DomainBox(dom["lower"], dom["upper"])
    except KeyError as exc:
        raise ConfigError(f"map.domain: missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"map.domain: {exc}") from None
    raw_branches = data.get("branches")
    if not isinstance(raw_branches, list) or not raw_branches:
        raise ConfigError("map.branches: expected a non-empty list")
    branches = []
    for idx, raw in enumerate(raw_branches):
        where = f"map.branches[{idx}]"
        try:
            box = DomainBox(raw["lower"], raw["upper"])
            branches.append(AffineBranch(box, raw["slopes"], raw["offsets"]))
        except KeyError as exc:
            raise ConfigError(f"{where}: missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
    try:
        return OpenSystem(domain, tuple(branches), name=name)
    except ValueError as exc:
        raise ConfigError(f"map: {exc}") from None

