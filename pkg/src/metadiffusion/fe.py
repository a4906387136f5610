"""Linear plane-strain pixel finite elements (validator only).

Each material pixel is a unit-size bilinear quad with full 2x2 Gauss
integration. The cell sits between two lubricated rigid platens: the bottom
row of nodes has u2 = 0, the top row u2 = -strain * height, and u1 is free on
both. Left and right boundaries are periodic with a free macroscopic
horizontal stretch, so the layer may expand laterally.

Buckling, contact, plasticity and dynamics are not modelled; results are a
small-strain linear stand-in for nonlinear ground truth.

Sign conventions: ``sigma22`` is tension-positive as computed, while
``effective_stress`` and the stress channel of field sequences are
compression-positive (``-sigma22``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .design import UnitCell, label_components

GAUSS = 1.0 / np.sqrt(3.0)
# local node order: bottom-left, bottom-right, top-right, top-left
XI = np.array([-1.0, 1.0, 1.0, -1.0])
ETA = np.array([-1.0, -1.0, 1.0, 1.0])


class SingularSystemError(RuntimeError):
    """The design has no load path between the platens."""


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class MaterialParams:
    youngs_modulus: float = 100.0
    poisson_ratio: float = 0.3

    def __post_init__(self):
        if self.youngs_modulus <= 0:
            raise ValueError("Young's modulus must be positive")
        if not -1.0 < self.poisson_ratio < 0.5:
            raise ValueError("Poisson ratio must lie in (-1, 0.5) for plane strain")

    def elasticity(self) -> np.ndarray:
        E, nu = self.youngs_modulus, self.poisson_ratio
        c = E / ((1 + nu) * (1 - 2 * nu))
        return c * np.array([
            [1 - nu, nu, 0.0],
            [nu, 1 - nu, 0.0],
            [0.0, 0.0, (1 - 2 * nu) / 2],
        ])

    @property
    def plane_strain_modulus(self) -> float:
        """Uniaxial-stress modulus E / (1 - nu^2) with free lateral expansion."""
        return self.youngs_modulus / (1 - self.poisson_ratio**2)


def strain_displacement(xi: float, eta: float) -> np.ndarray:
    """3x8 B matrix of a unit square element at local coordinates (xi, eta)."""
    # d/dx = 2 d/dxi for an element of size 1
    dN_dx = 2 * XI * (1 + eta * ETA) / 4
    dN_dy = 2 * ETA * (1 + xi * XI) / 4
    B = np.zeros((3, 8))
    B[0, 0::2] = dN_dx
    B[1, 1::2] = dN_dy
    B[2, 0::2] = dN_dy
    B[2, 1::2] = dN_dx
    return B


def element_stiffness(mat: MaterialParams) -> np.ndarray:
    D = mat.elasticity()
    ke = np.zeros((8, 8))
    for xi in (-GAUSS, GAUSS):
        for eta in (-GAUSS, GAUSS):
            B = strain_displacement(xi, eta)
            ke += B.T @ D @ B * 0.25  # det J = 1/4, unit weights
    return ke


@dataclass
class PixelMesh:
    """Full (non-periodic) node grid of an n x n cell; node (r, c) has index
    r * (n + 1) + c with r counted from the top."""

    n: int
    elements: np.ndarray  # (n_el, 4) full node ids, local order as XI/ETA
    pixels: np.ndarray  # (n_el, 2) row, col of each element

    @property
    def n_nodes(self) -> int:
        return (self.n + 1) ** 2

    def node_rc(self, node):
        return np.divmod(node, self.n + 1)


def load_bearing_mask(pixels: np.ndarray) -> np.ndarray:
    """Material in horizontally periodic 4-connected domains touching both platens."""
    labels, count = label_components(pixels, periodic_axes=(1,))
    if count == 0:
        return np.zeros(pixels.shape, dtype=bool)
    keep = np.intersect1d(np.unique(labels[0]), np.unique(labels[-1]))
    keep = keep[keep > 0]
    return np.isin(labels, keep)


def build_mesh(mask: np.ndarray) -> PixelMesh:
    n = mask.shape[0]
    rows, cols = np.nonzero(mask)
    stride = n + 1
    bl = (rows + 1) * stride + cols
    elements = np.stack([bl, bl + 1, rows * stride + cols + 1, rows * stride + cols], axis=1)
    return PixelMesh(n=n, elements=elements, pixels=np.stack([rows, cols], axis=1))


def _reduction(n: int) -> sp.csr_matrix:
    """Map reduced dofs [u1, u2 of columns 0..n-1, stretch] to full dofs."""
    stride = n + 1
    n_full = 2 * stride * stride
    n_red = 2 * (n + 1) * n + 1
    r, c = np.divmod(np.arange(stride * stride), stride)
    red_node = r * n + (c % n)
    rows = np.concatenate([2 * np.arange(stride * stride), 2 * np.arange(stride * stride) + 1])
    cols = np.concatenate([2 * red_node, 2 * red_node + 1])
    vals = np.ones(len(rows))
    wrapped = np.nonzero(c == n)[0]
    rows = np.concatenate([rows, 2 * wrapped])
    cols = np.concatenate([cols, np.full(len(wrapped), n_red - 1)])
    vals = np.concatenate([vals, np.ones(len(wrapped))])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_full, n_red))


def _node_groups(mesh: PixelMesh):
    """Node components of the periodic quotient mesh and whether any wraps around."""
    n = mesh.n
    r, c = mesh.node_rc(mesh.elements)
    quotient = r * n + (c % n)
    winding = (c == n).astype(int)
    parent = {}
    offset = {}

    def find(a):
        path = []
        while parent[a] != a:
            path.append(a)
            a = parent[a]
        # path compression with accumulated offsets
        total = 0
        for node in reversed(path):
            total += offset[node]
            offset[node] = total
            parent[node] = a
        return a

    wraps = False
    for q_el, w_el in zip(quotient, winding):
        for q in q_el:
            if q not in parent:
                parent[q] = q
                offset[q] = 0
        q0, w0 = q_el[0], w_el[0]
        for q, w in zip(q_el[1:], w_el[1:]):
            # unrolled period index: p(q) - p(q0) = w - w0
            ra, rb = find(q0), find(q)
            pa, pb = offset[q0] if q0 != ra else 0, offset[q] if q != rb else 0
            if ra == rb:
                if pb - pa != w - w0:
                    wraps = True
            else:
                parent[rb] = ra
                offset[rb] = pa + (w - w0) - pb
    groups = {}
    for q in parent:
        groups.setdefault(find(q), []).append(q)
    return list(groups.values()), wraps


@dataclass
class StiffnessSystem:
    mesh: PixelMesh
    material: MaterialParams
    K_full: sp.csr_matrix  # per unit Young's modulus
    T: sp.csr_matrix
    K_red: sp.csr_matrix
    groups: list
    wraps: bool
    active_red: np.ndarray  # reduced dofs touched by elements


def assemble(cell: UnitCell | np.ndarray, mat: MaterialParams = MaterialParams()) -> StiffnessSystem:
    """Assemble the global stiffness of the load-bearing material.

    Material that does not belong to a domain connecting both platens carries
    no load and is left out of the system.
    """
    pixels = cell.pixels if isinstance(cell, UnitCell) else np.asarray(cell)
    if pixels.ndim != 2 or pixels.shape[0] != pixels.shape[1]:
        raise ValueError("expected a square pixel array")
    mask = load_bearing_mask(pixels)
    if not mask.any():
        raise SingularSystemError("no material domain connects the top and bottom platens")
    mesh = build_mesh(mask)
    n = mesh.n
    # displacements under prescribed platen motion do not depend on E, so the
    # system is assembled for E = 1 and forces are scaled afterwards (exact linearity)
    ke = element_stiffness(MaterialParams(1.0, mat.poisson_ratio))
    dofs = np.empty((len(mesh.elements), 8), dtype=np.int64)
    dofs[:, 0::2] = 2 * mesh.elements
    dofs[:, 1::2] = 2 * mesh.elements + 1
    rows = np.repeat(dofs, 8, axis=1).ravel()
    cols = np.tile(dofs, (1, 8)).ravel()
    vals = np.tile(ke.ravel(), len(dofs))
    n_full = 2 * mesh.n_nodes
    K_full = sp.csr_matrix((vals, (rows, cols)), shape=(n_full, n_full))
    T = _reduction(n)
    K_red = (T.T @ K_full @ T).tocsr()
    active = np.unique(T[np.unique(dofs)].indices)
    groups, wraps = _node_groups(mesh)
    return StiffnessSystem(mesh, mat, K_full, T, K_red, groups, wraps, active)


@dataclass
class CompressionResult:
    applied_strain: float
    sigma22: np.ndarray  # (n, n) centroid stress, tension positive, 0 off the load path
    u1: np.ndarray  # (n, n) pixel-centre displacements
    u2: np.ndarray
    effective_stress: float  # compression positive, from the top platen reaction
    top_reaction: float
    bottom_reaction: float
    load_mask: np.ndarray
    stretch: float

    def frame(self) -> np.ndarray:
        """Stacked (compressive stress, u1, u2) channels."""
        return np.stack([-self.sigma22, self.u1, self.u2])


def _solve_system(system: StiffnessSystem, applied_strain: float) -> np.ndarray:
    n = system.mesh.n
    n_red = system.K_red.shape[0]
    u = np.zeros(n_red)
    fixed = np.zeros(n_red, dtype=bool)
    fixed[~np.isin(np.arange(n_red), system.active_red)] = True
    top = np.arange(n)  # reduced nodes of row 0
    bottom = n * n + np.arange(n)
    fixed[2 * top + 1] = True
    u[2 * top + 1] = -applied_strain * n
    fixed[2 * bottom + 1] = True
    for group in system.groups:
        fixed[2 * min(group)] = True
    if not system.wraps:
        fixed[n_red - 1] = True
    free = ~fixed
    K = system.K_red
    K_ff = K[free][:, free].tocsc()
    rhs = -K[free][:, fixed] @ u[fixed]
    u_free = spla.spsolve(K_ff, rhs)
    residual = np.linalg.norm(K_ff @ u_free - rhs)
    scale = max(np.linalg.norm(rhs), 1e-300)
    if not np.all(np.isfinite(u_free)) or residual > 1e-8 * scale:
        raise SolverError(f"linear solve failed, relative residual {residual / scale:.3e}")
    u[free] = u_free
    return u


def solve_compression(cell: UnitCell | np.ndarray, mat: MaterialParams = MaterialParams(),
                      applied_strain: float = 0.01,
                      system: StiffnessSystem | None = None) -> CompressionResult:
    """Compress the cell between lubricated platens by ``applied_strain``."""
    system = system or assemble(cell, mat)
    mesh = system.mesh
    n = mesh.n
    u_red = _solve_system(system, applied_strain)
    u_full = system.T @ u_red
    nodal = u_full.reshape(-1, 2)

    # remove each rigid horizontal translation mode by zeroing its mean u1
    r, c = mesh.node_rc(mesh.elements)
    quotient = r * n + (c % n)
    group_of = {}
    for gi, group in enumerate(system.groups):
        for q in group:
            group_of[q] = gi
    el_group = np.array([group_of[q] for q in quotient[:, 0]])
    for gi in range(len(system.groups)):
        nodes = np.unique(mesh.elements[el_group == gi])
        nodal[nodes, 0] -= nodal[nodes, 0].mean()

    forces = system.material.youngs_modulus * (system.K_full @ nodal.ravel()).reshape(-1, 2)
    top_reaction = forces[: n + 1, 1].sum()
    bottom_reaction = forces[n * (n + 1):, 1].sum()

    D = system.material.elasticity()
    B0 = strain_displacement(0.0, 0.0)
    u_el = nodal[mesh.elements].reshape(len(mesh.elements), 8)
    stress = u_el @ (D @ B0).T
    sigma22 = np.zeros((n, n))
    u1 = np.zeros((n, n))
    u2 = np.zeros((n, n))
    pr, pc = mesh.pixels[:, 0], mesh.pixels[:, 1]
    sigma22[pr, pc] = stress[:, 1]
    u1[pr, pc] = nodal[mesh.elements, 0].mean(axis=1)
    u2[pr, pc] = nodal[mesh.elements, 1].mean(axis=1)
    mask = np.zeros((n, n), dtype=bool)
    mask[pr, pc] = True
    return CompressionResult(
        applied_strain=applied_strain,
        sigma22=sigma22,
        u1=u1,
        u2=u2,
        effective_stress=-top_reaction / n,
        top_reaction=float(top_reaction),
        bottom_reaction=float(bottom_reaction),
        load_mask=mask,
        stretch=float(u_red[-1]),
    )


def run_strain_sweep(cell: UnitCell | np.ndarray, mat: MaterialParams = MaterialParams(),
                     strain_levels=None):
    """Fields and effective stress at every strain level.

    The response is linear, so a single unit-strain solve is scaled along
    the loading ray. Returns ``(frames, curve)`` with frames of shape
    ``(len(strain_levels), 3, n, n)``.
    """
    from .data import STRAIN_LEVELS

    levels = np.asarray(STRAIN_LEVELS if strain_levels is None else strain_levels, dtype=float)
    unit = solve_compression(cell, mat, applied_strain=1.0)
    base = unit.frame()
    frames = levels[:, None, None, None] * base[None]
    curve = levels * unit.effective_stress
    return frames, curve
