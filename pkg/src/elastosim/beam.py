"""Cantilever validation: analytic deflection, hex FEA baseline, mesh-free run.

A homogeneous rectangular cantilever (clamped at x = 0, uniform transverse
load) has the closed-form centerline deflection

    w(x) = q * x^2 * (6 L^2 - 4 L x + x^2) / (24 E I),    I = w h^3 / 12.

The same beam is solved two ways for comparison: a regular trilinear
hexahedral FEA at the voxel resolution (the accuracy baseline), and the
mesh-free pipeline under test.  All three centerline curves share a common
x sampling (element centers plus the x = 0 clamp datum and the x = L tip),
so pointwise convergence errors are directly comparable.

The comparison runs at Poisson ratio 0 by default: the analytic formula has
no Poisson term, and nu = 0 removes Poisson-contraction artifacts from both
discretizations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from elastosim.meshfree import (
    KPA_TO_N_PER_MM2,
    MaterialField,
    MeshFreeModel,
    build_model,
    elasticity_matrix,
)
from elastosim.solver import (
    LinearSystem,
    LoadCase,
    cg_solve,
    displace_landmarks,
    run_to_steady_state,
)
from elastosim.volume import RoiMask, VoxelVolume


@dataclass(frozen=True)
class BeamSpec:
    """Cantilever geometry, material, and distributed load.

    Attributes:
        L: length along x in mm.
        w: width along y in mm.
        h_beam: height along z in mm (the bending direction).
        E: Young's modulus in kPa.
        q_load: transverse distributed load in N per mm of length, applied
            toward -z.
        resolution: element / voxel edge length in mm.
    """

    L: float = 50.0
    w: float = 10.0
    h_beam: float = 10.0
    E: float = 12.0
    q_load: float = 1e-4
    resolution: float = 1.64

    def __post_init__(self):
        for name in ("L", "w", "h_beam", "E", "resolution"):
            if getattr(self, name) <= 0:
                raise ValueError(f"beam {name} must be > 0, got {getattr(self, name)}")
        if self.q_load < 0:
            raise ValueError(f"beam q_load must be >= 0, got {self.q_load}")
        if self.L <= self.h_beam:
            raise ValueError(
                f"beam must be slender (L > h), got L={self.L} h={self.h_beam}"
            )

    def cells(self) -> tuple[int, int, int]:
        """Cell counts per axis after snapping dimensions to whole cells.

        The snap tolerance is 2% so the default 1.64 mm voxel fits the
        50 x 10 x 10 mm benchmark (50 / 1.64 = 30.49, a 1.6% snap).

        Raises:
            ValueError: resolution misses a dimension by more than 2%, or
                fewer than 2 cells along any axis.
        """
        counts = []
        for name, extent in (("L", self.L), ("w", self.w), ("h_beam", self.h_beam)):
            n = max(1, round(extent / self.resolution))
            if abs(n * self.resolution - extent) > 0.02 * extent:
                raise ValueError(
                    f"resolution {self.resolution} does not divide {name}={extent} within 2%"
                )
            if n < 2:
                raise ValueError(
                    f"degenerate discretization: {name}={extent} spans {n} cell(s) "
                    f"at resolution {self.resolution}"
                )
            counts.append(n)
        return tuple(counts)

    def snapped_extents(self) -> tuple[float, float, float]:
        """Axis extents actually discretized: cell count times resolution."""
        cx, cy, cz = self.cells()
        return cx * self.resolution, cy * self.resolution, cz * self.resolution


@dataclass(frozen=True)
class DeflectionCurve:
    """Centerline deflection samples (x strictly increasing, w in load direction)."""

    x: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        w = np.asarray(self.w, dtype=np.float64)
        if x.shape != w.shape or x.ndim != 1:
            raise ValueError("x and w must be equal-length vectors")
        if len(x) >= 2 and np.any(np.diff(x) <= 0):
            raise ValueError("x samples must be strictly increasing")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "w", w)

    @property
    def tip_deflection(self) -> float:
        return float(self.w[-1])


def second_moment_rect(w: float, h_beam: float) -> float:
    """Second moment of a rectangular section about its bending axis: w*h^3/12.

    Raises:
        ValueError: non-positive dimensions.
    """
    if w <= 0 or h_beam <= 0:
        raise ValueError(f"section dimensions must be > 0, got w={w} h={h_beam}")
    return w * h_beam**3 / 12.0


def euler_bernoulli_deflection(x, spec: BeamSpec):
    """Cantilever deflection under uniform load at position(s) x along the axis.

    Raises:
        ValueError: x outside [0, L] (snapped length).
    """
    x = np.asarray(x, dtype=np.float64)
    L = spec.snapped_extents()[0]
    if np.any(x < 0) or np.any(x > L + 1e-9):
        raise ValueError(f"x must lie in [0, {L}]")
    e = spec.E * KPA_TO_N_PER_MM2
    w_eff, h_eff = spec.snapped_extents()[1:]
    inertia = second_moment_rect(w_eff, h_eff)
    return spec.q_load * x**2 * (6 * L**2 - 4 * L * x + x**2) / (24.0 * e * inertia)


def theory_curve(spec: BeamSpec, x: np.ndarray) -> DeflectionCurve:
    """Analytic deflection curve on the given x samples."""
    return DeflectionCurve(x=x, w=euler_bernoulli_deflection(x, spec))


def axis_samples(spec: BeamSpec) -> np.ndarray:
    """Shared x sampling: the clamp datum 0, element centers, and the tip x = L."""
    cx = spec.cells()[0]
    res = spec.resolution
    L = cx * res
    centers = (np.arange(cx) + 0.5) * res
    return np.concatenate([[0.0], centers, [L]])


@dataclass(frozen=True)
class BeamPhantom:
    """Mesh-free beam model plus its clamped-face node set and spec."""

    model: MeshFreeModel
    fixed_nodes: frozenset
    spec: BeamSpec


def build_beam_phantom(
    spec: BeamSpec,
    n_nodes: int = 300,
    k: int = 8,
    seed: int = 0,
    nu: float = 0.0,
    density: float = 1000.0,
    alpha: float = 0.1,
    beta: float = 0.01,
) -> BeamPhantom:
    """Voxelize the beam, build the mesh-free model, and fix the clamped face.

    Nodes whose Voronoi cells own any x = 0 voxel become the Dirichlet set;
    the distributed load is realized later as equal point loads on the
    remaining nodes totaling q_load * L.
    """
    cx, cy, cz = spec.cells()
    dims = (cx, cy, cz)
    n_vox = cx * cy * cz
    vol = VoxelVolume(
        dims=dims,
        spacing_mm=(spec.resolution,) * 3,
        kind="elastogram_shear_kPa",
        data=np.full(n_vox, spec.E, dtype=np.float32),
    )
    mask = RoiMask(dims=dims, flags=np.ones(n_vox, dtype=bool))
    field = MaterialField(volume=vol, mask=mask, nu=nu, density=density)
    model = build_model(field, n_nodes=n_nodes, k=k, alpha=alpha, beta=beta, seed=seed)

    # Voxel ix index per masked voxel, x fastest: flat % nx.
    voxel_ix = np.arange(n_vox) % cx
    fixed = frozenset(int(i) for i in np.unique(model.dofs.owner[voxel_ix == 0]))
    if not fixed or len(fixed) == model.n_nodes:
        raise ValueError("clamped-face node set is degenerate; adjust n_nodes or seed")
    return BeamPhantom(model=model, fixed_nodes=fixed, spec=spec)


def beam_load_case(phantom: BeamPhantom) -> LoadCase:
    """Equal -z point loads on free nodes totaling q_load * L; clamp fixed nodes."""
    spec = phantom.spec
    L = phantom.spec.snapped_extents()[0]
    free = [i for i in range(phantom.model.n_nodes) if i not in phantom.fixed_nodes]
    total = spec.q_load * L
    per_node = total / len(free)
    return LoadCase(
        point_loads=[(i, np.array([0.0, 0.0, -per_node])) for i in free],
        dirichlet=phantom.fixed_nodes,
    )


def simulate_beam(
    phantom: BeamPhantom,
    h: float = 10.0,
    v_tol: float = 1e-7,
    max_steps: int = 200,
    cg_tol: float = 1e-8,
    cg_max: int | None = None,
) -> DeflectionCurve:
    """Run the mesh-free beam to steady state and sample the centerline.

    Large h drives backward Euler to the static solution in a few steps.
    The curve holds the x = 0 clamp datum, element-center samples mapped by
    the shape functions, and the x = L tip.
    """
    model = phantom.model
    loads = beam_load_case(phantom)
    n_max = 4 * model.n_dofs if cg_max is None else cg_max
    final = run_to_steady_state(
        model, loads, h=h, max_steps=max_steps, v_tol=v_tol, N_max=n_max, tol=cg_tol
    )
    _, w_eff, h_eff = phantom.spec.snapped_extents()
    xs = axis_samples(phantom.spec)
    marks = [(f"x{j}", np.array([x, w_eff / 2.0, h_eff / 2.0])) for j, x in enumerate(xs[1:], 1)]
    moved = displace_landmarks(model, final, marks)
    deflection = np.array([-(pos[2] - h_eff / 2.0) for _, pos in moved])
    return DeflectionCurve(x=xs, w=np.concatenate([[0.0], deflection]))


def _hex_element_stiffness(res: float, young_kpa: float, nu: float) -> np.ndarray:
    """24x24 trilinear hexahedron stiffness for a cube of edge res (2x2x2 Gauss)."""
    d_mat = elasticity_matrix(young_kpa, nu)
    # Local node order: x fastest, then y, then z.
    corners = np.array(
        [[i, j, k] for k in (-1, 1) for j in (-1, 1) for i in (-1, 1)], dtype=float
    )
    corners = corners[[0, 1, 3, 2, 4, 5, 7, 6]]  # ring order per z face
    gp = np.array([-1.0, 1.0]) / np.sqrt(3.0)
    jac = res / 2.0
    det_j = jac**3
    ke = np.zeros((24, 24))
    for gz in gp:
        for gy in gp:
            for gx in gp:
                dn = np.empty((8, 3))
                for a in range(8):
                    xi, eta, zeta = corners[a]
                    dn[a, 0] = 0.125 * xi * (1 + eta * gy) * (1 + zeta * gz)
                    dn[a, 1] = 0.125 * (1 + xi * gx) * eta * (1 + zeta * gz)
                    dn[a, 2] = 0.125 * (1 + xi * gx) * (1 + eta * gy) * zeta
                dn /= jac  # d/dx = d/dxi * dxi/dx
                b = np.zeros((6, 24))
                cols = 3 * np.arange(8)
                b[0, cols + 0] = dn[:, 0]
                b[1, cols + 1] = dn[:, 1]
                b[2, cols + 2] = dn[:, 2]
                b[3, cols + 0] = dn[:, 1]
                b[3, cols + 1] = dn[:, 0]
                b[4, cols + 1] = dn[:, 2]
                b[4, cols + 2] = dn[:, 1]
                b[5, cols + 0] = dn[:, 2]
                b[5, cols + 2] = dn[:, 0]
                ke += b.T @ d_mat @ b * det_j
    return ke


def _hex_grid_connectivity(cells: tuple[int, int, int]) -> np.ndarray:
    """Element-to-node table for a regular grid, shape (n_elements, 8)."""
    cx, cy, cz = cells
    nnx, nny = cx + 1, cy + 1

    def node_id(i, j, k):
        return i + nnx * (j + nny * k)

    ei, ej, ek = np.meshgrid(np.arange(cx), np.arange(cy), np.arange(cz), indexing="ij")
    ei, ej, ek = ei.ravel(), ej.ravel(), ek.ravel()
    conn = np.stack(
        [
            node_id(ei, ej, ek),
            node_id(ei + 1, ej, ek),
            node_id(ei + 1, ej + 1, ek),
            node_id(ei, ej + 1, ek),
            node_id(ei, ej, ek + 1),
            node_id(ei + 1, ej, ek + 1),
            node_id(ei + 1, ej + 1, ek + 1),
            node_id(ei, ej + 1, ek + 1),
        ],
        axis=1,
    )
    return conn


def fea_baseline(
    spec: BeamSpec, nu: float = 0.0, cg_tol: float = 1e-10, cg_max: int | None = None
) -> DeflectionCurve:
    """Static trilinear-hex FEA of the cantilever on the voxel-resolution grid.

    Clamps the x = 0 node plane, applies the distributed load as consistent
    nodal loads of a uniform -z body force, solves K u = f with conjugate
    gradient, and samples centerline deflection on the shared x grid.

    Raises:
        ValueError: degenerate discretization (via spec.cells()).
    """
    cells = spec.cells()
    cx, cy, cz = cells
    res = spec.resolution
    L, w_eff, h_eff = spec.snapped_extents()
    n_nodes = (cx + 1) * (cy + 1) * (cz + 1)
    n_dofs = 3 * n_nodes

    ke = _hex_element_stiffness(res, spec.E, nu)
    conn = _hex_grid_connectivity(cells)
    n_el = len(conn)

    K = sp.csr_matrix((n_dofs, n_dofs))
    chunk = 4000
    for lo in range(0, n_el, chunk):
        sub = conn[lo : lo + chunk]
        gdofs = (3 * sub[:, :, None] + np.arange(3)).reshape(len(sub), 24)
        rows = np.repeat(gdofs, 24, axis=1).ravel()
        cols = np.tile(gdofs, (1, 24)).ravel()
        data = np.tile(ke.ravel(), len(sub))
        K = K + sp.coo_matrix((data, (rows, cols)), shape=(n_dofs, n_dofs)).tocsr()
    K.sum_duplicates()

    # Uniform body force -q/(w*h) per mm^3; each corner takes V_e/8 of its element.
    f = np.zeros(n_dofs)
    per_corner = spec.q_load / (w_eff * h_eff) * res**3 / 8.0
    z_dofs = 3 * conn.ravel() + 2
    np.add.at(f, z_dofs, -per_corner)

    clamped_nodes = np.arange(n_nodes)[np.arange(n_nodes) % (cx + 1) == 0]
    fixed = (3 * clamped_nodes[:, None] + np.arange(3)).ravel()
    if len(fixed) == 0:
        raise ValueError("no clamped nodes; the static system would be singular")
    keep = np.ones(n_dofs)
    keep[fixed] = 0.0
    P = sp.diags(keep)
    A = (P @ K @ P + sp.diags(1.0 - keep)).tocsr()
    b = f * keep

    n_max = 8 * n_dofs if cg_max is None else cg_max
    result = cg_solve(LinearSystem(A=A, b=b), N_max=n_max, tol=cg_tol)
    u = result.x

    uz = u[2::3].reshape(cz + 1, cy + 1, cx + 1)
    xs = axis_samples(spec)
    deflection = [0.0]
    for x in xs[1:]:
        deflection.append(-_trilinear_sample(uz, res, cells, x, w_eff / 2.0, h_eff / 2.0))
    return DeflectionCurve(x=xs, w=np.array(deflection))


def _trilinear_sample(uz: np.ndarray, res: float, cells, x: float, y: float, z: float) -> float:
    """Interpolate a node field at (x, y, z); upper boundaries clamp to the last cell."""
    cx, cy, cz = cells
    out = []
    for v, c in ((x, cx), (y, cy), (z, cz)):
        i = min(int(np.floor(v / res)), c - 1)
        out.append((i, 2.0 * (v - i * res) / res - 1.0))
    (i, xi), (j, eta), (k, zeta) = out
    acc = 0.0
    for dk, wz in ((0, (1 - zeta) / 2), (1, (1 + zeta) / 2)):
        for dj, wy in ((0, (1 - eta) / 2), (1, (1 + eta) / 2)):
            for di, wx in ((0, (1 - xi) / 2), (1, (1 + xi) / 2)):
                acc += wz * wy * wx * uz[k + dk, j + dj, i + di]
    return float(acc)


def convergence_error(sim: DeflectionCurve, theory: DeflectionCurve) -> dict:
    """Pointwise max-abs and RMS deviation between curves on a shared x grid.

    Raises:
        ValueError: the curves are sampled on different x grids.
    """
    if len(sim.x) != len(theory.x) or not np.allclose(sim.x, theory.x, atol=1e-9):
        raise ValueError("deflection curves are sampled on different x grids")
    diff = np.abs(sim.w - theory.w)
    return {"max_abs": float(diff.max()), "rms": float(np.sqrt(np.mean(diff**2)))}


def write_beam_convergence_csv(
    theory: DeflectionCurve, fea: DeflectionCurve, meshfree: DeflectionCurve, path: str | Path
) -> Path:
    """Write the three shared-grid curves and pointwise errors as CSV."""
    for other in (fea, meshfree):
        if not np.allclose(other.x, theory.x, atol=1e-9):
            raise ValueError("curves must share the x grid to be tabulated together")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["x_mm", "w_theory_mm", "w_fea_mm", "w_meshfree_mm", "err_fea_mm", "err_meshfree_mm"]
        )
        for i in range(len(theory.x)):
            writer.writerow(
                [
                    repr(float(theory.x[i])),
                    repr(float(theory.w[i])),
                    repr(float(fea.w[i])),
                    repr(float(meshfree.w[i])),
                    repr(abs(float(fea.w[i] - theory.w[i]))),
                    repr(abs(float(meshfree.w[i] - theory.w[i]))),
                ]
            )
    return path
