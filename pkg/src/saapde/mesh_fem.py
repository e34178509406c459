"""P1 finite elements on structured grids of (0, 1) and the unit square.

Every space is built on a node-based ``P1Layout``; a ``DiscreteSpace`` selects
a subset of the layout's nodes as degrees of freedom (all nodes for H1,
interior nodes for H01, boundary nodes for L2 on the boundary, nodes of a
subinterval for L2 on a subdomain). Coefficients of the bilinear forms are
piecewise constant per element (per boundary edge for boundary forms), so
all assembled matrices are exact for the forms they represent.
"""
from __future__ import annotations

import functools
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    DegenerateTriangle,
    EigSolveFailure,
    NonpositiveCoefficient,
    SpaceMismatch,
)

KINDS = ("H1", "H01", "L2_domain", "L2_boundary", "L2_subdomain")


@dataclass(frozen=True)
class Grid1D:
    n_interior: int

    def __post_init__(self):
        if int(self.n_interior) < 1:
            raise ValueError("Grid1D needs at least one interior node")

    @property
    def h(self) -> float:
        return 1.0 / (self.n_interior + 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_interior + 2) * self.h


@dataclass(frozen=True, eq=False)
class Mesh2D:
    """Triangulation with outward-oriented (counterclockwise) boundary edges."""

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray

    @classmethod
    def unit_square(cls, n: int) -> "Mesh2D":
        """Uniform ``n x n`` lattice on [0,1]^2, each cell split along its diagonal."""
        if n < 1:
            raise ValueError("need at least one cell per direction")
        t = np.linspace(0.0, 1.0, n + 1)
        xx, yy = np.meshgrid(t, t)  # node (i, j) has index j*(n+1)+i
        nodes = np.column_stack([xx.ravel(), yy.ravel()])
        idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
        p00 = idx[:-1, :-1].ravel()
        p10 = idx[:-1, 1:].ravel()
        p01 = idx[1:, :-1].ravel()
        p11 = idx[1:, 1:].ravel()
        tris = np.vstack(
            [np.column_stack([p00, p10, p11]), np.column_stack([p00, p11, p01])]
        )
        bottom = idx[0, :]
        right = idx[:, n]
        top = idx[n, ::-1]
        left = idx[::-1, 0]
        loop = np.concatenate([bottom[:-1], right[:-1], top[:-1], left[:-1]])
        edges = np.column_stack([loop, np.roll(loop, -1)])
        return cls(nodes, tris, edges)

    @property
    def n_cells(self) -> int:
        return int(round(np.sqrt(len(self.triangles) / 2)))

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_edges)


@dataclass(frozen=True, eq=False)
class P1Layout:
    """Element-level data from which every weighted matrix is assembled."""

    n_nodes: int
    elements: np.ndarray  # (ne, k) node indices
    local_stiffness: np.ndarray  # (ne, k, k)
    local_mass: np.ndarray  # (ne, k, k)
    boundary_edges: np.ndarray | None = None  # (nb, 2) in 2D
    local_boundary_mass: np.ndarray | None = None  # (nb, 2, 2)
    boundary_points: np.ndarray | None = None  # nodes carrying a boundary value
    dim: int = 1
    h: float | None = None
    coordinates: np.ndarray | None = None
    centroids: np.ndarray | None = None

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    def assemble(self, local, coeff=None, elements=None, mask=None):
        """Sparse node-by-node matrix from per-element blocks scaled by ``coeff``."""
        elems = self.elements if elements is None else elements
        vals = local if coeff is None else local * np.asarray(coeff, float)[:, None, None]
        if mask is not None:
            elems = elems[mask]
            vals = vals[mask]
        k = elems.shape[1]
        rows = np.repeat(elems, k, axis=1).ravel()
        cols = np.tile(elems, (1, k)).ravel()
        mat = sp.coo_matrix(
            (vals.ravel(), (rows, cols)), shape=(self.n_nodes, self.n_nodes)
        )
        return mat.tocsr()


def _layout_1d(grid: Grid1D) -> P1Layout:
    n_el = grid.n_interior + 1
    h = grid.h
    elems = np.column_stack([np.arange(n_el), np.arange(1, n_el + 1)])
    ks = np.array([[1.0, -1.0], [-1.0, 1.0]]) / h
    ms = np.array([[2.0, 1.0], [1.0, 2.0]]) * h / 6.0
    x = grid.nodes
    return P1Layout(
        n_nodes=n_el + 1,
        elements=elems,
        local_stiffness=np.broadcast_to(ks, (n_el, 2, 2)).copy(),
        local_mass=np.broadcast_to(ms, (n_el, 2, 2)).copy(),
        boundary_points=np.array([0, n_el]),
        dim=1,
        h=h,
        coordinates=x[:, None],
        centroids=(0.5 * (x[:-1] + x[1:]))[:, None],
    )


def _layout_2d(mesh: Mesh2D) -> P1Layout:
    area = mesh.signed_areas()
    if np.any(area <= 0):
        bad = np.flatnonzero(area <= 0)
        raise DegenerateTriangle(f"nonpositive signed area in triangles {bad[:10]}")
    p = mesh.nodes[mesh.triangles]
    # gradients of barycentric coordinates
    x, y = p[..., 0], p[..., 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    ks = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (
        4.0 * area[:, None, None]
    )
    mref = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    ms = area[:, None, None] * mref
    e = mesh.boundary_edges
    length = np.linalg.norm(mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]], axis=1)
    bm = length[:, None, None] * (np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0)
    return P1Layout(
        n_nodes=len(mesh.nodes),
        elements=mesh.triangles,
        local_stiffness=ks,
        local_mass=ms,
        boundary_edges=e,
        local_boundary_mass=bm,
        boundary_points=mesh.boundary_nodes(),
        dim=2,
        h=1.0 / mesh.n_cells,
        coordinates=mesh.nodes,
        centroids=mesh.centroids(),
    )


@dataclass(frozen=True, eq=False)
class DiscreteSpace:
    """P1 space on a layout restricted to the node set ``dofs``.

    ``mass`` realizes the L2 inner product of the space (the boundary L2
    product for kind ``L2_boundary``); ``stiffness`` is the plain gradient
    form. ``boundary_mass`` is only set for 2D volume spaces.
    """

    layout: P1Layout
    kind: str
    dofs: np.ndarray
    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    boundary_mass: sp.csr_matrix | None = None
    element_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return len(self.dofs)

    @property
    def coordinates(self) -> np.ndarray:
        return self.layout.coordinates[self.dofs]

    # ---- norms -------------------------------------------------------------
    @functools.cached_property
    def norm_matrix(self) -> sp.csr_matrix:
        """Gram matrix of the space's own norm (H1, H01 or L2)."""
        if self.kind == "H1":
            return (self.stiffness + self.mass).tocsr()
        if self.kind == "H01":
            return self.stiffness
        return self.mass

    @functools.cached_property
    def _riesz_lu(self):
        return spla.splu(self.norm_matrix.tocsc())

    @functools.cached_property
    def _mass_lu(self):
        return spla.splu(self.mass.tocsc())

    @functools.cached_property
    def lumped_mass(self) -> np.ndarray:
        """Row sums of the layout mass at the DOFs (integral of each hat function)."""
        if self.kind == "L2_boundary":
            full = self.layout.assemble(self.layout.local_boundary_mass, elements=self.layout.boundary_edges)
        else:
            full = self.layout.assemble(self.layout.local_mass, mask=self.element_mask)
        return np.asarray(full.sum(axis=1)).ravel()[self.dofs]

    @functools.cached_property
    def mass_is_diagonal(self) -> bool:
        off = self.mass - sp.diags(self.mass.diagonal())
        return off.count_nonzero() == 0

    def inner(self, v, w) -> float:
        return float(np.dot(v, self.mass @ w))

    def l2_norm(self, v) -> float:
        return float(np.sqrt(max(np.dot(v, self.mass @ v), 0.0)))

    def h1_norm(self, v) -> float:
        return float(np.sqrt(max(np.dot(v, (self.stiffness @ v) + (self.mass @ v)), 0.0)))

    def h01_norm(self, v) -> float:
        return float(np.sqrt(max(np.dot(v, self.stiffness @ v), 0.0)))

    def norm(self, v) -> float:
        """Norm of the space itself (H1, H01 or L2 depending on ``kind``)."""
        return float(np.sqrt(max(np.dot(v, self.norm_matrix @ v), 0.0)))

    def dual_norm(self, f) -> float:
        """Norm of the functional with coefficient vector ``f`` in the dual space."""
        x = self._riesz_lu.solve(np.asarray(f, float))
        return float(np.sqrt(max(np.dot(f, x), 0.0)))

    def riesz(self, f) -> np.ndarray:
        """Representative in the norm inner product of the functional ``f``."""
        return self._riesz_lu.solve(np.asarray(f, float))

    def mass_solve(self, f) -> np.ndarray:
        """L2 Riesz representative of a dual vector."""
        return self._mass_lu.solve(np.asarray(f, float))

    def field(self, coeffs) -> "FieldVector":
        return FieldVector(self, np.asarray(coeffs, float))


@dataclass(frozen=True, eq=False)
class FieldVector:
    space: DiscreteSpace
    coeffs: np.ndarray

    def __post_init__(self):
        if len(self.coeffs) != self.space.dim:
            raise SpaceMismatch(
                f"coefficient length {len(self.coeffs)} != space dimension {self.space.dim}"
            )

    def norm(self) -> float:
        return self.space.norm(self.coeffs)

    def l2_norm(self) -> float:
        return self.space.l2_norm(self.coeffs)


def _restrict(mat, rows, cols=None):
    cols = rows if cols is None else cols
    return mat[rows][:, cols].tocsr()


def assemble_1d(grid: Grid1D, kind: str, subdomain: tuple[float, float] | None = None) -> DiscreteSpace:
    """P1 space on (0,1). ``L2_subdomain`` needs grid-aligned ``subdomain=(a, b)``."""
    if kind not in KINDS or kind == "L2_boundary":
        raise ValueError(f"unsupported 1D space kind {kind!r}")
    lay = _layout_1d(grid)
    n = lay.n_nodes
    mask = None
    if kind == "H01":
        dofs = np.arange(1, n - 1)
    elif kind == "L2_subdomain":
        if subdomain is None:
            raise ValueError("L2_subdomain needs a subdomain interval")
        a, b = subdomain
        ia, ib = a / grid.h, b / grid.h
        if not (np.isclose(ia, round(ia)) and np.isclose(ib, round(ib)) and 0 <= a < b <= 1):
            raise ValueError("subdomain endpoints must be grid nodes with a < b")
        ia, ib = int(round(ia)), int(round(ib))
        dofs = np.arange(ia, ib + 1)
        mask = (lay.elements[:, 0] >= ia) & (lay.elements[:, 1] <= ib)
    else:
        dofs = np.arange(n)
    mass = _restrict(lay.assemble(lay.local_mass, mask=mask), dofs)
    stiff = _restrict(lay.assemble(lay.local_stiffness, mask=mask), dofs)
    meta = {"subdomain": subdomain} if subdomain is not None else {}
    return DiscreteSpace(lay, kind, dofs, mass, stiff, None, mask, meta)


def assemble_2d(mesh: Mesh2D, kind: str) -> DiscreteSpace:
    """P1 space on a 2D mesh; ``L2_boundary`` lives on the boundary nodes."""
    if kind not in KINDS or kind == "L2_subdomain":
        raise ValueError(f"unsupported 2D space kind {kind!r}")
    lay = _layout_2d(mesh)
    full_m = lay.assemble(lay.local_mass)
    full_k = lay.assemble(lay.local_stiffness)
    full_b = lay.assemble(lay.local_boundary_mass, elements=lay.boundary_edges)
    if kind == "L2_boundary":
        dofs = lay.boundary_points
        mass = _restrict(full_b, dofs)
        # tangential stiffness along the boundary loop is never needed; keep a zero matrix
        return DiscreteSpace(lay, kind, dofs, mass, sp.csr_matrix(mass.shape), None)
    if kind == "H01":
        interior = np.setdiff1d(np.arange(lay.n_nodes), lay.boundary_points)
        dofs = interior
    else:
        dofs = np.arange(lay.n_nodes)
    return DiscreteSpace(
        lay, kind, dofs, _restrict(full_m, dofs), _restrict(full_k, dofs), _restrict(full_b, dofs)
    )


def _check_coeff(coeff, n, name, allow_zero=False):
    c = np.asarray(coeff, float)
    if c.ndim == 0:
        c = np.full(n, float(c))
    if c.shape != (n,):
        raise SpaceMismatch(f"{name} needs {n} per-element values, got shape {c.shape}")
    bad = c < 0 if allow_zero else c <= 0
    if np.any(bad) or not np.all(np.isfinite(c)):
        raise NonpositiveCoefficient(f"{name} must be {'nonnegative' if allow_zero else 'positive'}")
    return c


def weighted_stiffness(space: DiscreteSpace, coeff) -> sp.csr_matrix:
    """Matrix of (coeff grad y, grad v) for a per-element constant coefficient."""
    lay = space.layout
    c = _check_coeff(coeff, lay.n_elements, "coefficient")
    return _restrict(lay.assemble(lay.local_stiffness, c, mask=space.element_mask), space.dofs)


def weighted_mass(space: DiscreteSpace, coeff) -> sp.csr_matrix:
    """Matrix of (coeff y, v) for a per-element constant coefficient."""
    lay = space.layout
    c = _check_coeff(coeff, lay.n_elements, "coefficient")
    return _restrict(lay.assemble(lay.local_mass, c, mask=space.element_mask), space.dofs)


def weighted_boundary_mass(space: DiscreteSpace, coeff) -> sp.csr_matrix:
    """Matrix of (coeff tr y, tr v) on the boundary; coefficient per boundary edge, >= 0."""
    lay = space.layout
    if lay.boundary_edges is None:
        raise SpaceMismatch("boundary forms need a 2D mesh")
    c = _check_coeff(coeff, len(lay.boundary_edges), "boundary coefficient", allow_zero=True)
    full = lay.assemble(lay.local_boundary_mass, c, elements=lay.boundary_edges)
    return _restrict(full, space.dofs)


def friedrichs_constant(space: DiscreteSpace) -> float:
    """sup ||v||_L2 / ||grad v||_L2 over the discrete H01 space."""
    if space.kind != "H01":
        raise SpaceMismatch("Friedrichs' constant is defined on H01 spaces")
    k = space.stiffness
    m = space.mass
    try:
        if space.dim <= 2500:
            lam = scipy.linalg.eigh(
                k.toarray(), m.toarray(), eigvals_only=True, subset_by_index=[0, 0]
            )[0]
        else:
            lam = spla.eigsh(k.tocsc(), k=1, M=m.tocsc(), sigma=0.0, which="LM",
                             return_eigenvectors=False)[0]
    except (np.linalg.LinAlgError, spla.ArpackError) as exc:
        raise EigSolveFailure(str(exc)) from exc
    if not np.isfinite(lam) or lam <= 0:
        raise EigSolveFailure(f"nonpositive smallest eigenvalue {lam}")
    return float(1.0 / np.sqrt(lam))


def _check_trace_space(space_h1):
    if space_h1.kind not in ("H1", "L2_domain") or space_h1.layout.dim != 2:
        raise SpaceMismatch("trace needs an H1 space over a 2D mesh")


def trace_matrix(space_h1: DiscreteSpace, space_bnd: DiscreteSpace) -> sp.csr_matrix:
    """Restriction matrix mapping H1 coefficients to boundary coefficients."""
    _check_trace_space(space_h1)
    if space_bnd.kind != "L2_boundary" or space_bnd.layout.n_nodes != space_h1.layout.n_nodes:
        raise SpaceMismatch("target must be the boundary space of the same mesh")
    pos = np.full(space_h1.layout.n_nodes, -1)
    pos[space_h1.dofs] = np.arange(space_h1.dim)
    cols = pos[space_bnd.dofs]
    rows = np.arange(space_bnd.dim)
    return sp.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(space_bnd.dim, space_h1.dim)
    )


def trace_apply(space_h1: DiscreteSpace, y, space_bnd: DiscreteSpace | None = None) -> FieldVector:
    _check_trace_space(space_h1)
    coeffs = y.coeffs if isinstance(y, FieldVector) else np.asarray(y, float)
    if isinstance(y, FieldVector) and y.space is not space_h1:
        raise SpaceMismatch("field does not live in the given H1 space")
    if len(coeffs) != space_h1.dim:
        raise SpaceMismatch("coefficient length does not match the H1 space")
    if space_bnd is None:
        space_bnd = assemble_2d_boundary_like(space_h1)
    return FieldVector(space_bnd, trace_matrix(space_h1, space_bnd) @ coeffs)


def trace_adjoint_apply(space_h1: DiscreteSpace, w, space_bnd: DiscreteSpace) -> np.ndarray:
    """Dual vector of v -> (w, tr v)_{L2(boundary)}."""
    t = trace_matrix(space_h1, space_bnd)
    return t.T @ (space_bnd.mass @ np.asarray(w, float))


def assemble_2d_boundary_like(space_h1: DiscreteSpace) -> DiscreteSpace:
    """Boundary L2 space sharing ``space_h1``'s layout."""
    lay = space_h1.layout
    dofs = lay.boundary_points
    full_b = lay.assemble(lay.local_boundary_mass, elements=lay.boundary_edges)
    mass = _restrict(full_b, dofs)
    return DiscreteSpace(lay, "L2_boundary", dofs, mass, sp.csr_matrix(mass.shape), None)


def trace_constant(space_h1: DiscreteSpace, space_bnd: DiscreteSpace) -> float:
    """Operator norm of the trace from H1 into L2 of the boundary (dense eigensolve)."""
    t = trace_matrix(space_h1, space_bnd)
    a = (t.T @ space_bnd.mass @ t).toarray()
    g = space_h1.norm_matrix.toarray() if space_h1.kind == "H1" else (
        space_h1.stiffness + space_h1.mass).toarray()
    try:
        lam = scipy.linalg.eigh(a, g, eigvals_only=True, subset_by_index=[len(a) - 1, len(a) - 1])[0]
    except np.linalg.LinAlgError as exc:
        raise EigSolveFailure(str(exc)) from exc
    return float(np.sqrt(max(lam, 0.0)))


def operator_norm_power(apply, apply_adjoint, dim, inner=None, iters=500, tol=1e-12, seed=0):
    """Power iteration on ``apply_adjoint(apply(x))``; estimates the operator norm.

    ``apply_adjoint`` must be the Hilbert adjoint with respect to ``inner``
    (Euclidean when omitted), so Riesz maps have to be folded into it.
    """
    inner = inner or (lambda a, b: float(np.dot(a, b)))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(dim)
    x /= np.sqrt(inner(x, x))
    lam = 0.0
    for _ in range(iters):
        y = apply_adjoint(apply(x))
        new = inner(x, y)
        nrm = np.sqrt(inner(y, y))
        if nrm == 0:
            return 0.0
        x = y / nrm
        if abs(new - lam) <= tol * max(abs(new), 1.0):
            lam = new
            break
        lam = new
    return float(np.sqrt(max(lam, 0.0)))


def export_matrix_market(space: DiscreteSpace, directory) -> list[str]:
    """Write mass/stiffness(/boundary_mass) as MatrixMarket text files."""
    os.makedirs(directory, exist_ok=True)
    out = []
    mats = {"mass": space.mass, "stiffness": space.stiffness}
    if space.boundary_mass is not None:
        mats["boundary_mass"] = space.boundary_mass
    for name, mat in mats.items():
        path = os.path.join(directory, f"{space.kind}_{name}.mtx")
        scipy.io.mmwrite(path, sp.coo_matrix(mat))
        out.append(path)
    return out
