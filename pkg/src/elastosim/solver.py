"""Implicit-Euler dynamics with a conjugate-gradient core and landmark mapping.

Each step solves the backward-Euler velocity update

    (M + h*C + h^2*K_eff) * dqdot = h * (F(q, qdot) - h * K_eff * qdot)

where K_eff folds any support-spring stiffness into K, and F is the total
current force: gravity, point loads, spring constants, and the internal
force -K q - C qdot.  The system matrix is SPD for h > 0, so plain conjugate
gradient solves it; iterations are capped (default 200) to bound per-step
cost.  Positions then update as q += h * qdot_new.

Dirichlet constraints are applied by reducing constrained rows and columns
to identity, which keeps the system SPD and its size fixed.  The core
assembly is unit-agnostic raw arithmetic; the model layer feeds it the
consistent mm / tonne / second quantities built during assembly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from elastosim.meshfree import MeshFreeModel, shepard_weights


class NonConvergenceError(RuntimeError):
    """Raised when a run hits its step budget before reaching steady state."""

    def __init__(self, message: str, last_velocity_inf: float):
        super().__init__(message)
        self.last_velocity_inf = last_velocity_inf


class IndefiniteSystemError(RuntimeError):
    """Raised when CG detects a non-SPD system (p^T A p <= 0)."""


@dataclass(frozen=True)
class SimState:
    """Nodal displacement and velocity at a time point.

    Attributes:
        q: displacements in mm, 3 per node.
        qdot: velocities in mm/s, same length as q.
        t: elapsed time in s.
    """

    q: np.ndarray
    qdot: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        qdot = np.asarray(self.qdot, dtype=np.float64)
        if q.shape != qdot.shape or q.ndim != 1:
            raise ValueError(f"q and qdot must be equal-length vectors, got {q.shape} {qdot.shape}")
        if not (np.isfinite(q).all() and np.isfinite(qdot).all()):
            raise ValueError("state contains non-finite components")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qdot", qdot)

    @classmethod
    def rest(cls, n_dofs: int) -> "SimState":
        return cls(q=np.zeros(n_dofs), qdot=np.zeros(n_dofs), t=0.0)


@dataclass(frozen=True)
class LoadCase:
    """External loading: gravity, point forces, support springs, fixed nodes.

    Attributes:
        gravity: acceleration in mm/s^2, applied as M*g per node.
        point_loads: (node index, force N 3-vector) pairs.
        support_springs: (node index, stiffness N/mm, anchor position mm)
            entries; each pulls its node toward the anchor.
        dirichlet: node indices held fixed at their rest position.
    """

    gravity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    point_loads: tuple = ()
    support_springs: tuple = ()
    dirichlet: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))
        loads = tuple((int(i), np.asarray(f, dtype=float)) for i, f in self.point_loads)
        springs = tuple(
            (int(i), float(k), np.asarray(a, dtype=float)) for i, k, a in self.support_springs
        )
        for i, k, _ in springs:
            if k < 0:
                raise ValueError(f"spring stiffness must be >= 0, got {k} on node {i}")
        object.__setattr__(self, "point_loads", loads)
        object.__setattr__(self, "support_springs", springs)
        object.__setattr__(self, "dirichlet", frozenset(int(i) for i in self.dirichlet))

    def validate_against(self, n_nodes: int):
        indices = [i for i, _ in self.point_loads]
        indices += [i for i, _, _ in self.support_springs]
        indices += list(self.dirichlet)
        for i in indices:
            if not 0 <= i < n_nodes:
                raise ValueError(f"load references node {i}, model has {n_nodes} nodes")


@dataclass(frozen=True)
class LinearSystem:
    """One implicit-Euler step's SPD system A x = b."""

    A: sp.csr_matrix
    b: np.ndarray


@dataclass(frozen=True)
class CgResult:
    """Conjugate-gradient outcome: solution, iterations, relative residual."""

    x: np.ndarray
    iterations: int
    residual: float
    converged: bool
    iterates: list | None = None


def implicit_system(
    M: np.ndarray,
    K: sp.spmatrix,
    C: sp.spmatrix,
    q: np.ndarray,
    qdot: np.ndarray,
    f_ext: np.ndarray,
    h: float,
    fixed_dofs=(),
) -> LinearSystem:
    """Raw backward-Euler assembly: A = M + h*C + h^2*K, b = h*(F - h*K*qdot).

    F is the total current force f_ext - K q - C qdot.  Fixed DOFs get their
    row and column reduced to identity and their b entry zeroed.  All
    quantities must share one consistent unit system.

    Raises:
        ValueError: h <= 0 or mismatched dimensions.
    """
    if h <= 0:
        raise ValueError(f"step size must be > 0, got {h}")
    M = np.asarray(M, dtype=np.float64)
    n = len(M)
    if K.shape != (n, n) or C.shape != (n, n) or len(q) != n or len(qdot) != n or len(f_ext) != n:
        raise ValueError("system dimensions disagree")

    A = (sp.diags(M) + h * C + (h * h) * K).tocsr()
    force = f_ext - K @ q - C @ qdot
    b = h * (force - h * (K @ qdot))

    if len(fixed_dofs):
        fixed = np.fromiter(fixed_dofs, dtype=np.int64)
        keep = np.ones(n)
        keep[fixed] = 0.0
        P = sp.diags(keep)
        ident = sp.diags(1.0 - keep)
        A = (P @ A @ P + ident).tocsr()
        b = b * keep
    A.sum_duplicates()
    return LinearSystem(A=A, b=b)


def _spring_terms(model: MeshFreeModel, loads: LoadCase):
    """Spring stiffness diagonal (N/mm per DOF) and constant force k*(anchor - x0)."""
    n_dofs = model.n_dofs
    diag = np.zeros(n_dofs)
    const = np.zeros(n_dofs)
    for i, k, anchor in loads.support_springs:
        sl = slice(3 * i, 3 * i + 3)
        diag[sl] += k
        const[sl] += k * (anchor - model.dofs.nodes[i])
    return diag, const


def external_force(model: MeshFreeModel, loads: LoadCase) -> np.ndarray:
    """Constant part of the external force: gravity, point loads, spring anchors (N)."""
    loads.validate_against(model.n_nodes)
    f = model.matrices.M * np.tile(loads.gravity, model.n_nodes)
    for i, force in loads.point_loads:
        f[3 * i : 3 * i + 3] += force
    _, const = _spring_terms(model, loads)
    return f + const


def build_system(model: MeshFreeModel, state: SimState, loads: LoadCase, h: float) -> LinearSystem:
    """Assemble one implicit-Euler step's SPD system for a mesh-free model.

    Support springs are treated implicitly: their stiffness joins K inside A,
    so arbitrarily stiff supports stay stable.

    Raises:
        ValueError: h <= 0, dimension mismatch, or out-of-range load indices.
    """
    if len(state.q) != model.n_dofs:
        raise ValueError(
            f"state has {len(state.q)} DOFs, model has {model.n_dofs}"
        )
    f_const = external_force(model, loads)
    spring_diag, _ = _spring_terms(model, loads)
    K_eff = model.matrices.K + sp.diags(spring_diag) if spring_diag.any() else model.matrices.K
    fixed = [3 * i + c for i in sorted(loads.dirichlet) for c in range(3)]
    return implicit_system(
        model.matrices.M, K_eff, model.matrices.C, state.q, state.qdot, f_const, h, fixed
    )


def cg_solve(
    system: LinearSystem,
    x0: np.ndarray | None = None,
    N_max: int = 200,
    tol: float = 1e-6,
    record_iterates: bool = False,
) -> CgResult:
    """Plain conjugate gradient on an SPD system.

    Starts from x0 (zeros by default) with p_0 = r_0 and iterates the
    standard alpha / residual / beta recurrences until the relative residual
    ||r|| / ||b|| drops to tol or N_max iterations are spent.  A zero b
    short-circuits to the exact solution x = 0.

    Raises:
        IndefiniteSystemError: a search direction gives p^T A p <= 0.
    """
    A, b = system.A, system.b
    n = len(b)
    norm_b = float(np.linalg.norm(b))
    if norm_b == 0.0:
        x = np.zeros(n)
        return CgResult(x=x, iterations=0, residual=0.0, converged=True,
                        iterates=[x.copy()] if record_iterates else None)

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    r = b - A @ x
    p = r.copy()
    rr = float(r @ r)
    iterates = [x.copy()] if record_iterates else None
    residual = np.sqrt(rr) / norm_b
    if residual <= tol:
        return CgResult(x=x, iterations=0, residual=residual, converged=True, iterates=iterates)

    for n_iter in range(1, N_max + 1):
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise IndefiniteSystemError(
                f"indefinite system: p^T A p = {pAp} at iteration {n_iter}"
            )
        alpha = rr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rr_next = float(r @ r)
        if record_iterates:
            iterates.append(x.copy())
        residual = np.sqrt(rr_next) / norm_b
        if residual <= tol:
            return CgResult(x=x, iterations=n_iter, residual=residual, converged=True,
                            iterates=iterates)
        beta = rr_next / rr
        p = r + beta * p
        rr = rr_next

    return CgResult(x=x, iterations=N_max, residual=residual, converged=False, iterates=iterates)


def step(
    model: MeshFreeModel,
    state: SimState,
    loads: LoadCase,
    h: float = 1e-3,
    N_max: int = 200,
    tol: float = 1e-6,
) -> SimState:
    """Advance one backward-Euler step: solve for dqdot, then integrate q.

    The CG iteration cap bounds per-step cost; a capped (unconverged) solve
    still advances the state with its best iterate.
    """
    system = build_system(model, state, loads, h)
    result = cg_solve(system, N_max=N_max, tol=tol)
    qdot_new = state.qdot + result.x
    q_new = state.q + h * qdot_new
    if loads.dirichlet:
        fixed = [3 * i + c for i in loads.dirichlet for c in range(3)]
        q_new[fixed] = state.q[fixed]
        qdot_new[fixed] = 0.0
    return SimState(q=q_new, qdot=qdot_new, t=state.t + h)


def run_to_steady_state(
    model: MeshFreeModel,
    loads: LoadCase,
    h: float = 1e-3,
    max_steps: int = 10000,
    v_tol: float = 1e-4,
    N_max: int = 200,
    tol: float = 1e-6,
    state: SimState | None = None,
) -> SimState:
    """Step until the velocity infinity-norm stays below v_tol for 3 steps.

    Raises:
        NonConvergenceError: max_steps reached first; carries the last
            velocity infinity-norm.
    """
    current = SimState.rest(model.n_dofs) if state is None else state
    quiet = 0
    v_inf = float(np.abs(current.qdot).max()) if len(current.qdot) else 0.0
    for _ in range(max_steps):
        current = step(model, current, loads, h=h, N_max=N_max, tol=tol)
        v_inf = float(np.abs(current.qdot).max())
        quiet = quiet + 1 if v_inf < v_tol else 0
        if quiet >= 3:
            return current
    raise NonConvergenceError(
        f"no steady state after {max_steps} steps; last |qdot|_inf = {v_inf:.3e} mm/s",
        last_velocity_inf=v_inf,
    )


def displace_landmarks(
    model: MeshFreeModel, state: SimState, landmarks: list[tuple[str, np.ndarray]]
) -> list[tuple[str, np.ndarray]]:
    """Map nodal displacements to landmark positions via the shape functions.

    Each landmark at rest position x moves by sum_i w_i(x) q_i with the same
    Shepard construction used for assembly, evaluated at x.

    Returns:
        (label, current position mm) per landmark.

    Raises:
        ValueError: a landmark lies outside the masked volume.
    """
    vol, mask = model.field.volume, model.field.mask
    nx, ny, nz = vol.dims
    spacing = np.asarray(vol.spacing_mm)
    grid_flags = mask.flags.reshape(nz, ny, nx)
    positions = np.array([np.asarray(p, dtype=float) for _, p in landmarks]).reshape(-1, 3)
    for (label, _), pos in zip(landmarks, positions):
        # Points exactly on the volume's boundary belong to the nearest voxel.
        ijk = np.clip(
            np.floor(pos / spacing + 1e-9).astype(int), 0, np.array(vol.dims) - 1
        )
        i, j, k = ijk
        upper = np.array(vol.dims) * spacing
        outside = np.any(pos < -1e-9) or np.any(pos > upper + 1e-9)
        if outside or not (0 <= i < nx and 0 <= j < ny and 0 <= k < nz) or not grid_flags[k, j, i]:
            raise ValueError(f"landmark {label!r} at {pos.tolist()} is outside the masked volume")

    k_support = min(model.shape.k, model.n_nodes)
    idx, w, _ = shepard_weights(positions, model.dofs.nodes, k=k_support)
    q_nodes = state.q.reshape(-1, 3)
    moved = positions + np.einsum("lk,lkc->lc", w, q_nodes[idx])
    return [(label, moved[row]) for row, (label, _) in enumerate(landmarks)]


def write_trajectory_csv(states: list[SimState], path: str | Path) -> Path:
    """Write per-step nodal displacements as CSV `step,t_s,node,qx_mm,qy_mm,qz_mm`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "t_s", "node", "qx_mm", "qy_mm", "qz_mm"])
        for step_i, st in enumerate(states):
            q = st.q.reshape(-1, 3)
            for node in range(len(q)):
                writer.writerow(
                    [step_i, repr(float(st.t)), node,
                     repr(float(q[node, 0])), repr(float(q[node, 1])), repr(float(q[node, 2]))]
                )
    return path


def write_landmarks_csv(landmarks: list[tuple[str, np.ndarray]], path: str | Path) -> Path:
    """Write landmark positions as CSV `label,x_mm,y_mm,z_mm`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "x_mm", "y_mm", "z_mm"])
        for label, pos in landmarks:
            writer.writerow([label, repr(float(pos[0])), repr(float(pos[1])), repr(float(pos[2]))])
    return path
