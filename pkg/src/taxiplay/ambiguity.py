"""Wasserstein ambiguity sets over the requests-per-minute distribution and model switching."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np
from scipy.optimize import linprog

from .demand import CategoricalDistribution, DemandModel


class AmbiguityError(ValueError):
    pass


def _aligned(p: CategoricalDistribution, r: CategoricalDistribution):
    atoms = np.array(sorted(set(p.support) | set(r.support)), dtype=float)
    pa = np.array([p.prob(int(a)) for a in atoms])
    ra = np.array([r.prob(int(a)) for a in atoms])
    return atoms, pa, ra


def wasserstein1(p: CategoricalDistribution, r: CategoricalDistribution) -> float:
    """Order-1 Wasserstein distance between scalar categoricals: sum of |CDF gap| times atom spacing."""
    if not isinstance(p, CategoricalDistribution) or not isinstance(r, CategoricalDistribution):
        raise AmbiguityError("wasserstein1 expects two CategoricalDistribution values")
    atoms, pa, ra = _aligned(p, r)
    gap = np.abs(np.cumsum(pa - ra))[:-1]
    return float(np.dot(gap, np.diff(atoms)))


def wasserstein1_lp(p: CategoricalDistribution, r: CategoricalDistribution) -> float:
    """Same distance as an explicit transport linear program (reference implementation)."""
    xp = np.asarray(p.support, dtype=float)
    xr = np.asarray(r.support, dtype=float)
    a, b = len(xp), len(xr)
    cost = np.abs(xp[:, None] - xr[None, :]).ravel()
    rows = np.zeros((a + b, a * b))
    for i in range(a):
        rows[i, i * b:(i + 1) * b] = 1.0
    for j in range(b):
        rows[a + j, j::b] = 1.0
    rhs = np.concatenate([p.probs, r.probs])
    # one marginal constraint is redundant; drop it to keep the system full rank
    res = linprog(cost, A_eq=rows[:-1], b_eq=rhs[:-1], bounds=(0, None), method="highs")
    if not res.success:
        raise AmbiguityError(f"transport LP failed: {res.message}")
    return float(res.fun)


def support_diameter(dist: CategoricalDistribution) -> int:
    return dist.support[-1] - dist.support[0]


def q_valid_radius(q: float, samples: int, diameter: float, log_base: float = 10.0) -> float:
    """Smallest radius containing the true distribution with probability at least ``q``.

    ``(B + 0.75) * (L / X + 2 * sqrt(L / X))`` with ``L = -log(1 - q)``; ``log_base``
    selects the logarithm (10 by default, ``math.e`` for natural log).
    """
    if not 0 < q < 1:
        raise AmbiguityError(f"q must lie in (0, 1), got {q}")
    if samples < 1:
        raise AmbiguityError(f"sample count must be at least 1, got {samples}")
    if diameter <= 0:
        raise AmbiguityError(f"support diameter must be positive, got {diameter}")
    if log_base <= 0 or log_base == 1:
        raise AmbiguityError(f"invalid log base {log_base}")
    ell = -math.log(1.0 - q, log_base)
    ratio = ell / samples
    return (diameter + 0.75) * (ratio + 2.0 * math.sqrt(ratio))


@dataclass(frozen=True)
class AmbiguitySet:
    reference: CategoricalDistribution
    radius: float
    q: float
    samples: int
    diameter: float

    @classmethod
    def build(cls, reference: CategoricalDistribution, q: float, samples: int, diameter: float | None = None,
              log_base: float = 10.0, radius: float | None = None) -> "AmbiguitySet":
        diameter = support_diameter(reference) if diameter is None else diameter
        theta = q_valid_radius(q, samples, diameter, log_base) if radius is None else radius
        if theta < 0:
            raise AmbiguityError("radius must be nonnegative")
        return cls(reference, float(theta), q, samples, diameter)

    def distance(self, current: CategoricalDistribution) -> float:
        return wasserstein1(current, self.reference)

    def contains(self, current: CategoricalDistribution) -> bool:
        return in_region(self, current)


def in_region(region: AmbiguitySet, current: CategoricalDistribution) -> bool:
    return wasserstein1(current, region.reference) < region.radius


@dataclass
class LibraryEntry:
    model: DemandModel
    policy: object
    region: AmbiguitySet

    @property
    def label(self) -> str:
        return self.model.label


def select_model(library: Sequence[LibraryEntry], current_eta: CategoricalDistribution,
                 active: int = 0) -> tuple[int, bool]:
    """Index of the entry to use next and whether the active one was left.

    The active entry is kept while ``current_eta`` lies inside its region. Otherwise
    the entry whose reference is nearest wins (earlier entries on ties), and the
    switch flag is raised even if that is the active entry again.
    """
    if not library:
        raise AmbiguityError("empty model library")
    if not 0 <= active < len(library):
        raise AmbiguityError(f"active index {active} outside library of {len(library)}")
    if in_region(library[active].region, current_eta):
        return active, False
    dists = [wasserstein1(current_eta, e.region.reference) for e in library]
    return int(np.argmin(dists)), True


# --- library manifest -----------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    label: str
    model_path: Path
    weights_path: Path


def load_manifest(stream: TextIO, base_dir: Path | str = ".") -> list[ManifestEntry]:
    """Lines ``label model_file weights_file``; relative paths resolve against ``base_dir``."""
    base = Path(base_dir)
    out = []
    for lineno, raw in enumerate(stream, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise AmbiguityError(f"manifest line {lineno}: expected 'label model_file weights_file'")
        label, model, weights = parts
        out.append(ManifestEntry(label, base / model, base / weights))
    if not out:
        raise AmbiguityError("manifest lists no models")
    return out
