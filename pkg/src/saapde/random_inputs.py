"""Random coefficient models, replayable i.i.d. sample streams, exact expectations.

Streams are counter based: the sample at position ``i`` of a stream with seed
``s`` is generated from ``numpy.random.default_rng([s, i, tag])``, so any
sample can be reproduced without generating its predecessors and concurrent
draws never share generator state.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import UnsupportedContinuousModel

# field tags of the counter-based generator
TAG_ATOM_PICK = 0
TAG_KAPPA = 1
TAG_G = 2
TAG_SIGMA = 3
TAG_R = 4
TAG_B = 5
ATOM_NAMESPACE = 7919


@dataclass(frozen=True)
class Distributions:
    """Uniform laws of the scalar factors behind each coefficient field."""

    kappa: tuple[float, float] = (1.0, 2.0)
    kappa_per_quadrant: bool = True
    g: tuple[float, float] = (0.5, 1.5)
    sigma: tuple[float, float] = (0.0, 1.0)
    r: tuple[float, float] = (1.0, 2.0)
    b_scale: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        for name in ("kappa", "g", "sigma", "r", "b_scale"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.kappa[0] <= 0 or self.g[0] <= 0 or self.r[0] <= 0:
            raise ValueError("kappa, g and r must be bounded away from zero")
        if self.sigma[0] < 0 or self.b_scale[0] < 0:
            raise ValueError("sigma and the load scale must be nonnegative")


@dataclass(frozen=True, eq=False)
class FieldLayout:
    """Geometry a model needs to turn scalar draws into coefficient arrays."""

    n_elements: int
    quadrant: np.ndarray | None  # per-element quadrant id in 0..3, None in 1D
    n_boundary_edges: int
    b0: np.ndarray  # nodal coefficients of the reference load
    b0_norm: float

    @classmethod
    def from_space(cls, space, b0) -> "FieldLayout":
        lay = space.layout
        quadrant = None
        if lay.dim == 2:
            c = lay.centroids
            quadrant = (c[:, 0] >= 0.5).astype(int) + 2 * (c[:, 1] >= 0.5).astype(int)
        nb = 0 if lay.boundary_edges is None else len(lay.boundary_edges)
        b0 = np.asarray(b0, float)
        return cls(lay.n_elements, quadrant, nb, b0, space.l2_norm(b0))


@dataclass(frozen=True, eq=False)
class Sample:
    """One realization of the random inputs."""

    kappa: np.ndarray
    g: np.ndarray
    sigma: np.ndarray
    r: np.ndarray
    b: np.ndarray
    origin: tuple
    scalars: dict = field(default_factory=dict)

    def same_as(self, other: "Sample") -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("kappa", "g", "sigma", "r", "b")
        )


@dataclass(frozen=True, eq=False)
class RandomModel:
    dists: Distributions
    layout: FieldLayout
    support_kind: str = "continuous"
    weights: tuple[float, ...] | None = None
    atoms: tuple[Sample, ...] | None = None
    atom_seed: int = 0

    @classmethod
    def continuous(cls, dists: Distributions, layout: FieldLayout) -> "RandomModel":
        return cls(dists, layout)

    @classmethod
    def finite(cls, dists, layout, n_atoms=5, atom_seed=0, weights=None) -> "RandomModel":
        """Finite support whose atoms are draws from the continuous laws."""
        if n_atoms < 1:
            raise ValueError("need at least one atom")
        w = np.full(n_atoms, 1.0 / n_atoms) if weights is None else np.asarray(weights, float)
        if len(w) != n_atoms or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-15 * n_atoms:
            raise ValueError("atom weights must be nonnegative and sum to one")
        base = cls(dists, layout)
        atoms = tuple(
            base.realize(lambda tag, k=k: np.random.default_rng([atom_seed, k, tag, ATOM_NAMESPACE]),
                         origin=("atom", k))
            for k in range(n_atoms)
        )
        return cls(dists, layout, "finite_atoms", tuple(float(x) for x in w), atoms, atom_seed)

    @classmethod
    def from_atoms(cls, dists, layout, atoms, weights) -> "RandomModel":
        w = tuple(float(x) for x in weights)
        if len(w) != len(atoms) or abs(sum(w) - 1.0) > 1e-15 * len(w):
            raise ValueError("atom weights must sum to one")
        return cls(dists, layout, "finite_atoms", w, tuple(atoms))

    # ---- bounds ------------------------------------------------------------
    @property
    def kappa_min(self) -> float:
        return self.dists.kappa[0]

    @property
    def kappa_max(self) -> float:
        return self.dists.kappa[1]

    @property
    def g_min(self) -> float:
        return self.dists.g[0]

    @property
    def r_min(self) -> float:
        return self.dists.r[0]

    @property
    def b_max(self) -> float:
        return self.dists.b_scale[1] * self.layout.b0_norm

    def satisfies_bounds(self, s: Sample) -> bool:
        d = self.dists
        tol = 1e-14
        ok = (
            np.all(s.kappa >= d.kappa[0] - tol) and np.all(s.kappa <= d.kappa[1] + tol)
            and np.all(s.g >= d.g[0] - tol) and np.all(s.g <= d.g[1] + tol)
            and np.all(s.sigma >= 0.0)
            and np.all(s.r >= d.r[0] - tol) and np.all(s.r <= d.r[1] + tol)
        )
        return bool(ok)

    # ---- realization -------------------------------------------------------
    def realize(self, rng_for, origin) -> Sample:
        """Build a sample; ``rng_for(tag)`` returns the generator for one field."""
        d, lay = self.dists, self.layout
        n_k = 4 if (d.kappa_per_quadrant and lay.quadrant is not None) else 1
        kq = rng_for(TAG_KAPPA).uniform(*d.kappa, size=n_k)
        kappa = kq[lay.quadrant] if n_k == 4 else np.full(lay.n_elements, kq[0])
        g = rng_for(TAG_G).uniform(*d.g)
        sigma = rng_for(TAG_SIGMA).uniform(*d.sigma)
        r = rng_for(TAG_R).uniform(*d.r)
        s = rng_for(TAG_B).uniform(*d.b_scale)
        sample = Sample(
            kappa=kappa,
            g=np.full(lay.n_elements, g),
            sigma=np.full(lay.n_boundary_edges, sigma),
            r=np.full(lay.n_elements, r),
            b=s * lay.b0,
            origin=origin,
            scalars={"kappa": tuple(float(v) for v in kq), "g": float(g),
                     "sigma": float(sigma), "r": float(r), "b_scale": float(s)},
        )
        assert self.satisfies_bounds(sample)
        return sample


@dataclass(frozen=True)
class SampleStream:
    model: RandomModel
    seed: int

    def draw(self, i: int) -> Sample:
        """Sample at position ``i`` (1-based); a pure function of (seed, i)."""
        if i < 1:
            raise ValueError("stream positions start at 1")
        m = self.model
        if m.support_kind == "finite_atoms":
            u = np.random.default_rng([self.seed, i, TAG_ATOM_PICK]).random()
            cdf = np.cumsum(m.weights)
            k = int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))
            return m.atoms[k]
        return m.realize(lambda tag: np.random.default_rng([self.seed, i, tag]),
                         origin=(self.seed, i))

    def batch(self, n: int, start: int = 1) -> list[Sample]:
        return [self.draw(i) for i in range(start, start + n)]


def exact_expectation(model: RandomModel, f):
    """Weighted sum over the atoms of a finite-support model (fixed atom order)."""
    if model.support_kind != "finite_atoms":
        raise UnsupportedContinuousModel("exact expectations need finite support")
    total = None
    for w, atom in zip(model.weights, model.atoms):
        term = w * f(atom)
        total = term if total is None else total + term
    return total


def ordered_mean(values):
    """Mean with a left-to-right reduction, so the result is independent of scheduling."""
    total = None
    for v in values:
        total = v if total is None else total + v
    return total / len(values)


def sample_mean(stream: SampleStream, n: int, f, threads: int = 1):
    """Mean of ``f`` over draws 1..n; evaluations may run concurrently."""
    if n < 1:
        raise ValueError("need at least one sample")
    samples = stream.batch(n)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(f, samples))
    else:
        values = [f(s) for s in samples]
    return ordered_mean(values)
