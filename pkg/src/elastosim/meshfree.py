"""Mesh-free model construction: DOF sampling, shape functions, assembly.

A model is built from a masked per-voxel Young's modulus field in three
stages.  Lloyd-relaxed Voronoi sampling picks the DOF node positions inside
the mask.  Inverse-distance-squared Shepard functions over the k nearest
nodes give each voxel center a partition-of-unity weight set with analytic
gradients.  Mass, stiffness, and damping are then assembled with one
integration point per voxel: lumped M, K = sum of B^T D B * V_voxel, and
Rayleigh C = alpha*M + beta*K.

Units are a consistent mm / tonne / second system: lengths mm, mass tonnes,
force N, stress N/mm^2.  Young's modulus enters in kPa (1 kPa = 1e-3 N/mm^2)
and density in kg/m^3 (1 kg/m^3 = 1e-12 t/mm^3); both are converted during
assembly so that M, K, C can be combined without hidden factors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from elastosim.volume import RoiMask, VoxelVolume

KPA_TO_N_PER_MM2 = 1e-3
KG_PER_M3_TO_T_PER_MM3 = 1e-12

# Squared distance below which a voxel center and node are treated as
# coincident: the Shepard weight saturates at 1 and its gradient at 0.
_COINCIDENT_D2 = 1e-18

_ARCHIVE_MAGIC = b"ESIMMDL1"


@dataclass(frozen=True)
class MaterialField:
    """Per-voxel Young's modulus with global Poisson ratio and density.

    Attributes:
        volume: stiffness volume whose data holds Young's modulus in kPa.
        mask: voxels that belong to the simulated tissue.
        nu: global Poisson ratio, in [0, 0.5) so the elasticity tensor
            stays nonsingular.
        density: mass density in kg/m^3.
    """

    volume: VoxelVolume
    mask: RoiMask
    nu: float = 0.45
    density: float = 1000.0

    def __post_init__(self):
        if self.mask.dims != self.volume.dims:
            raise ValueError(
                f"mask dims {self.mask.dims} do not match volume dims {self.volume.dims}"
            )
        if not 0.0 <= self.nu < 0.5:
            raise ValueError(f"Poisson ratio must lie in [0, 0.5), got {self.nu}")
        if self.density <= 0:
            raise ValueError(f"density must be > 0, got {self.density}")
        if self.mask.n_selected == 0:
            raise ValueError("mask selects no voxels")
        masked_E = self.volume.data[self.mask.flags]
        if float(masked_E.min()) <= 0.0:
            raise ValueError("every masked-in voxel needs Young's modulus > 0")

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.volume.spacing_mm
        return sx * sy * sz

    def masked_centers(self) -> np.ndarray:
        """Centers of masked-in voxels in mm, shape (n_masked, 3), x fastest."""
        return self.volume.voxel_centers()[self.mask.flags]

    def masked_young(self) -> np.ndarray:
        """Young's modulus (kPa) of masked-in voxels as float64."""
        return self.volume.data[self.mask.flags].astype(np.float64)

    def with_young(self, young_kpa) -> "MaterialField":
        """Same geometry and globals with voxel stiffness replaced.

        Args:
            young_kpa: scalar (constant stiffness) or full per-voxel array.
        """
        data = np.full(self.volume.n_voxels, float(young_kpa), dtype=np.float32) \
            if np.ndim(young_kpa) == 0 else np.asarray(young_kpa, dtype=np.float32)
        vol = VoxelVolume(
            dims=self.volume.dims,
            spacing_mm=self.volume.spacing_mm,
            kind=self.volume.kind,
            data=data,
        )
        return replace(self, volume=vol)


@dataclass(frozen=True)
class DofSet:
    """Lloyd-relaxed node positions plus the voxel-to-node Voronoi assignment.

    Attributes:
        nodes: node positions in mm, shape (n_nodes, 3).
        owner: nearest-node index per masked voxel, aligned with the
            mask's selected voxels in x-fastest order.
    """

    nodes: np.ndarray
    owner: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.float64)
        owner = np.asarray(self.owner, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 3:
            raise ValueError(f"nodes must be (n, 3), got {nodes.shape}")
        if owner.ndim != 1:
            raise ValueError("owner must be a flat per-masked-voxel index array")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "owner", owner)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class ShapeMap:
    """Shepard weights and gradients of the k nearest nodes per masked voxel.

    Attributes:
        indices: node indices, shape (n_masked, k).
        weights: dimensionless weights, shape (n_masked, k); each row sums
            to 1 and is elementwise >= 0.
        gradients: analytic weight gradients in 1/mm, shape (n_masked, k, 3);
            each row's gradients sum to the zero vector.
        corrected_gradients: first-order-consistent gradients, same shape,
            used for strain evaluation and stiffness integration.  Raw
            Shepard gradients only reproduce constant fields; the minimal
            per-voxel shift enforcing sum_i ghat_i x_i^T = I makes the
            discrete gradient exact on linear displacement fields, without
            which the assembled stiffness locks severely under bending.
        k: support size.
    """

    indices: np.ndarray
    weights: np.ndarray
    gradients: np.ndarray
    corrected_gradients: np.ndarray
    k: int

    @property
    def n_voxels(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class SystemMatrices:
    """Assembled lumped mass, stiffness, and Rayleigh damping.

    M is the diagonal as a flat (3n,) array in tonnes; K (N/mm) and C
    (N·s/mm) are sparse CSR, symmetric positive semi-definite, with the
    internal-force convention f_int = -K q - C q_dot.
    """

    M: np.ndarray
    K: sp.csr_matrix
    C: sp.csr_matrix

    @property
    def n_dofs(self) -> int:
        return len(self.M)


@dataclass(frozen=True)
class MeshFreeModel:
    """Simulation-ready model: field, nodes, shape map, matrices, rest state."""

    field: MaterialField
    dofs: DofSet
    shape: ShapeMap
    matrices: SystemMatrices
    q0: np.ndarray
    alpha: float
    beta: float
    seed: int

    @property
    def n_nodes(self) -> int:
        return self.dofs.n_nodes

    @property
    def n_dofs(self) -> int:
        return 3 * self.dofs.n_nodes

    @property
    def total_mass_t(self) -> float:
        """Total lumped mass in tonnes (sum over one component per node)."""
        return float(self.matrices.M[0::3].sum())

    @property
    def total_mass_kg(self) -> float:
        return self.total_mass_t * 1000.0

    def with_constant_young(self, young_kpa: float) -> "MeshFreeModel":
        """Rebuild K and C with a constant stiffness, reusing nodes and shapes.

        The DOF sampling and shape map depend only on the mask geometry, so
        an atlas-stiffness twin shares them and differs only in K (and the
        beta part of C).
        """
        field = self.field.with_young(young_kpa)
        K = assemble_stiffness(self.shape, field, n_nodes=self.n_nodes)
        C = assemble_damping(self.matrices.M, K, self.alpha, self.beta)
        mats = SystemMatrices(M=self.matrices.M, K=K, C=C)
        return replace(self, field=field, matrices=mats)


def sample_dofs(
    field: MaterialField,
    n_nodes: int,
    seed: int = 0,
    max_lloyd_iters: int = 50,
    move_tol_mm: float = 1e-6,
) -> DofSet:
    """Pick DOF nodes by Lloyd-relaxed Voronoi sampling of masked voxel centers.

    Seeds are drawn without replacement from the masked voxel centers, then
    iterated: assign each voxel to its nearest node, move each node to the
    centroid of its owned voxels, until the largest node movement drops
    below move_tol_mm or max_lloyd_iters is reached.  A node that loses all
    voxels respawns at the voxel center farthest from its nearest node.

    Raises:
        ValueError: n_nodes < 1 or more nodes than masked voxels.
    """
    centers = field.masked_centers()
    n_vox = len(centers)
    if n_nodes < 1:
        raise ValueError(f"n_nodes must be >= 1, got {n_nodes}")
    if n_nodes > n_vox:
        raise ValueError(f"n_nodes {n_nodes} exceeds masked voxel count {n_vox}")

    rng = np.random.default_rng(seed)
    nodes = centers[rng.choice(n_vox, size=n_nodes, replace=False)].copy()

    for _ in range(max_lloyd_iters):
        d2 = cdist(centers, nodes, "sqeuclidean")
        owner = np.argmin(d2, axis=1)  # ties resolve to the lowest node index
        new_nodes = nodes.copy()
        nearest_d2 = d2[np.arange(n_vox), owner]
        for i in range(n_nodes):
            sel = owner == i
            if sel.any():
                new_nodes[i] = centers[sel].mean(axis=0)
            else:
                new_nodes[i] = centers[np.argmax(nearest_d2)]
        movement = float(np.linalg.norm(new_nodes - nodes, axis=1).max())
        nodes = new_nodes
        if movement < move_tol_mm:
            break

    owner = np.argmin(cdist(centers, nodes, "sqeuclidean"), axis=1)
    return DofSet(nodes=nodes, owner=owner)


def shepard_weights(points: np.ndarray, nodes: np.ndarray, k: int):
    """Inverse-distance-squared Shepard weights of the k nearest nodes.

    For each query point x: w_i(x) = (1/d_i^2) / sum_j (1/d_j^2) over the k
    nearest nodes, with analytic gradients.  A point coincident with a node
    gets weight 1 there (gradient 0 everywhere, the Shepard flat spot).

    Args:
        points: query positions, shape (m, 3).
        nodes: node positions, shape (n, 3).
        k: support size, 1 <= k <= n.

    Returns:
        (indices, weights, gradients) with shapes (m, k), (m, k), (m, k, 3).
    """
    points = np.asarray(points, dtype=np.float64)
    nodes = np.asarray(nodes, dtype=np.float64)
    m, n = len(points), len(nodes)
    if not 1 <= k <= n:
        raise ValueError(f"support size k={k} must lie in [1, {n}]")

    indices = np.empty((m, k), dtype=np.int64)
    weights = np.empty((m, k), dtype=np.float64)
    gradients = np.empty((m, k, 3), dtype=np.float64)

    # Chunked so the (chunk, n) distance matrix stays small.
    chunk = max(1, int(4e6) // max(n, 1))
    for lo in range(0, m, chunk):
        hi = min(lo + chunk, m)
        block = points[lo:hi]
        d2 = cdist(block, nodes, "sqeuclidean")
        if k < n:
            part = np.argpartition(d2, k - 1, axis=1)[:, :k]
        else:
            part = np.broadcast_to(np.arange(n), (hi - lo, n)).copy()
        d2k = np.take_along_axis(d2, part, axis=1)
        # Sort each support by (distance, node index) for a stable layout.
        order = np.lexsort((part, d2k), axis=1)
        idx = np.take_along_axis(part, order, axis=1)
        d2k = np.take_along_axis(d2k, order, axis=1)

        diff = block[:, None, :] - nodes[idx]  # (b, k, 3)
        coincident = d2k[:, 0] <= _COINCIDENT_D2

        with np.errstate(divide="ignore"):
            s = 1.0 / d2k  # (b, k)
        s[coincident] = 0.0
        S = s.sum(axis=1)
        S[coincident] = 1.0
        w = s / S[:, None]

        # grad s_i = -2 (x - x_i) / d_i^4; grad w_i = (grad s_i - w_i grad S)/S
        gs = -2.0 * diff * (s * s)[:, :, None]
        gS = gs.sum(axis=1)
        gw = (gs - w[:, :, None] * gS[:, None, :]) / S[:, None, None]

        w[coincident] = 0.0
        w[coincident, 0] = 1.0
        gw[coincident] = 0.0

        indices[lo:hi] = idx
        weights[lo:hi] = w
        gradients[lo:hi] = gw
    return indices, weights, gradients


def correct_gradients(gradients: np.ndarray, node_positions: np.ndarray) -> np.ndarray:
    """Adjust per-point gradients to be exact on linear displacement fields.

    For each point the raw gradients g_i are shifted by the smallest
    (Frobenius-norm) perturbation that enforces sum_i ghat_i x_i^T = I:

        ghat_i = g_i + xc_i C^-1 (I - A)^T

    with A = sum_i g_i x_i^T, xc_i the support positions centered on their
    mean, and C = sum_i xc_i xc_i^T their second-moment matrix.  Because the
    shift lives in the row space of the centered positions, sum_i ghat_i = 0
    carries over from the raw gradients, and the correction stays defined
    even when A itself is singular (e.g. a point coincident with a node,
    where all raw gradients vanish).  Points whose support does not span
    three independent directions (C near singular) keep their raw gradients.

    Args:
        gradients: raw gradients, shape (m, k, 3).
        node_positions: support-node positions per point, shape (m, k, 3).

    Returns:
        Corrected gradients, shape (m, k, 3).
    """
    centered = node_positions - node_positions.mean(axis=1, keepdims=True)
    moment = np.einsum("mka,mkb->mab", centered, centered)
    residual = np.eye(3) - np.einsum("mka,mkb->mab", gradients, node_positions)
    det = np.linalg.det(moment)
    scale = np.einsum("maa->m", moment) / 3.0
    ok = det > scale**3 * 1e-9
    corrected = gradients.copy()
    if ok.any():
        shift = np.linalg.solve(moment[ok], residual[ok].transpose(0, 2, 1))
        corrected[ok] += np.einsum("mka,mab->mkb", centered[ok], shift)
    return corrected


def shape_weights(dofs: DofSet, field: MaterialField, k: int = 8) -> ShapeMap:
    """Build the per-voxel ShapeMap over the field's masked voxel centers.

    Raises:
        ValueError: k out of [1, n_nodes].
    """
    centers = field.masked_centers()
    indices, weights, gradients = shepard_weights(centers, dofs.nodes, k)
    corrected = correct_gradients(gradients, dofs.nodes[indices])
    return ShapeMap(
        indices=indices,
        weights=weights,
        gradients=gradients,
        corrected_gradients=corrected,
        k=k,
    )


def elasticity_matrix(young_kpa: float, nu: float) -> np.ndarray:
    """Isotropic linear elasticity matrix D (6x6, Voigt engineering shear), N/mm^2."""
    e = young_kpa * KPA_TO_N_PER_MM2
    c = e / ((1.0 + nu) * (1.0 - 2.0 * nu))
    d = np.zeros((6, 6))
    d[:3, :3] = c * nu
    d[0, 0] = d[1, 1] = d[2, 2] = c * (1.0 - nu)
    d[3, 3] = d[4, 4] = d[5, 5] = c * (1.0 - 2.0 * nu) / 2.0
    return d


def _strain_displacement(gradients: np.ndarray) -> np.ndarray:
    """B matrices from weight gradients: (v, k, 3) -> (v, 6, 3k)."""
    v, k, _ = gradients.shape
    gx, gy, gz = gradients[..., 0], gradients[..., 1], gradients[..., 2]
    b = np.zeros((v, 6, 3 * k))
    cols = 3 * np.arange(k)
    b[:, 0, cols + 0] = gx
    b[:, 1, cols + 1] = gy
    b[:, 2, cols + 2] = gz
    b[:, 3, cols + 0] = gy
    b[:, 3, cols + 1] = gx
    b[:, 4, cols + 1] = gz
    b[:, 4, cols + 2] = gy
    b[:, 5, cols + 0] = gz
    b[:, 5, cols + 2] = gx
    return b


def assemble_stiffness(
    shape: ShapeMap, field: MaterialField, n_nodes: int | None = None
) -> sp.csr_matrix:
    """Assemble sparse K (N/mm) with one integration point per masked voxel.

    Each voxel contributes B^T D(E_voxel, nu) B * V_voxel at its center,
    with B built from the first-order-consistent gradients; the result is
    explicitly symmetrized against roundoff.

    Raises:
        ValueError: a masked voxel has non-positive stiffness.
    """
    young = field.masked_young()
    if young.min() <= 0:
        raise ValueError("encountered masked voxel with non-positive Young's modulus")
    if n_nodes is None:
        n_nodes = int(shape.indices.max()) + 1
    n_dofs = 3 * n_nodes
    v_vox = field.voxel_volume_mm3
    d_unit = elasticity_matrix(1.0, field.nu)  # D is linear in E

    rows_all, cols_all, data_all = [], [], []
    chunk = 4096
    for lo in range(0, shape.n_voxels, chunk):
        hi = min(lo + chunk, shape.n_voxels)
        b = _strain_displacement(shape.corrected_gradients[lo:hi])
        ke = np.einsum("via,ij,vjb->vab", b, d_unit, b, optimize=True)
        ke *= (young[lo:hi] * v_vox)[:, None, None]
        gdofs = (3 * shape.indices[lo:hi, :, None] + np.arange(3)).reshape(hi - lo, -1)
        w = gdofs.shape[1]
        rows_all.append(np.repeat(gdofs, w, axis=1).ravel())
        cols_all.append(np.tile(gdofs, (1, w)).ravel())
        data_all.append(ke.ravel())

    K = sp.coo_matrix(
        (np.concatenate(data_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
        shape=(n_dofs, n_dofs),
    ).tocsr()
    K = (K + K.T) * 0.5
    K.sum_duplicates()
    return K


def assemble_mass(shape: ShapeMap, field: MaterialField, n_nodes: int | None = None) -> np.ndarray:
    """Assemble the lumped mass diagonal as a flat (3n,) array in tonnes.

    M_ii = sum over voxels of w_i * rho * V_voxel, replicated on the three
    components of node i; partition of unity conserves total mass.
    """
    if n_nodes is None:
        n_nodes = int(shape.indices.max()) + 1
    rho = field.density * KG_PER_M3_TO_T_PER_MM3
    per_voxel = rho * field.voxel_volume_mm3
    node_mass = np.zeros(n_nodes)
    np.add.at(node_mass, shape.indices, shape.weights * per_voxel)
    return np.repeat(node_mass, 3)


def assemble_damping(M: np.ndarray, K: sp.csr_matrix, alpha: float, beta: float) -> sp.csr_matrix:
    """Rayleigh damping C = alpha*M + beta*K (N·s/mm), symmetric PSD.

    Raises:
        ValueError: negative alpha or beta.
    """
    if alpha < 0 or beta < 0:
        raise ValueError(f"damping coefficients must be >= 0, got alpha={alpha} beta={beta}")
    C = (beta * K + sp.diags(alpha * M)).tocsr()
    C.sum_duplicates()
    return C


def build_model(
    field: MaterialField,
    n_nodes: int = 200,
    k: int = 8,
    alpha: float = 0.1,
    beta: float = 0.01,
    seed: int = 0,
    max_lloyd_iters: int = 50,
) -> MeshFreeModel:
    """Build a complete mesh-free model from a material field.

    Raises:
        ValueError: n_nodes < 4, or any component precondition fails.
    """
    if n_nodes < 4:
        raise ValueError(f"a 3D model needs at least 4 nodes, got {n_nodes}")
    dofs = sample_dofs(field, n_nodes=n_nodes, seed=seed, max_lloyd_iters=max_lloyd_iters)
    shape = shape_weights(dofs, field, k=min(k, dofs.n_nodes))
    K = assemble_stiffness(shape, field, n_nodes=dofs.n_nodes)
    M = assemble_mass(shape, field, n_nodes=dofs.n_nodes)
    C = assemble_damping(M, K, alpha, beta)
    return MeshFreeModel(
        field=field,
        dofs=dofs,
        shape=shape,
        matrices=SystemMatrices(M=M, K=K, C=C),
        q0=np.zeros(3 * dofs.n_nodes),
        alpha=alpha,
        beta=beta,
        seed=seed,
    )


def _pack_arrays(arrays: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    manifest, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        blob = arr.tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    return manifest, b"".join(blobs)


def save_model(model: MeshFreeModel, path: str | Path) -> Path:
    """Serialize a model to a single archive: magic, JSON header, packed arrays.

    Layout: 8-byte magic, little-endian u64 header length, UTF-8 JSON header
    (scalars plus an array manifest with dtype/shape/offset), then the raw
    array bytes back to back.
    """
    path = Path(path)
    K, C = model.matrices.K.tocsr(), model.matrices.C.tocsr()
    arrays = {
        "volume_data": model.field.volume.data,
        "mask_flags": model.field.mask.flags,
        "nodes": model.dofs.nodes,
        "owner": model.dofs.owner,
        "shape_indices": model.shape.indices,
        "shape_weights": model.shape.weights,
        "shape_gradients": model.shape.gradients,
        "shape_corrected": model.shape.corrected_gradients,
        "M": model.matrices.M,
        "K_data": K.data,
        "K_indices": K.indices.astype(np.int64),
        "K_indptr": K.indptr.astype(np.int64),
        "C_data": C.data,
        "C_indices": C.indices.astype(np.int64),
        "C_indptr": C.indptr.astype(np.int64),
        "q0": model.q0,
    }
    manifest, payload = _pack_arrays(arrays)
    header = {
        "format": "meshfree-model",
        "version": 1,
        "dims": list(model.field.volume.dims),
        "spacing_mm": list(model.field.volume.spacing_mm),
        "kind": model.field.volume.kind,
        "nu": model.field.nu,
        "density": model.field.density,
        "shape_k": model.shape.k,
        "alpha": model.alpha,
        "beta": model.beta,
        "seed": model.seed,
        "arrays": manifest,
    }
    blob = json.dumps(header).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_ARCHIVE_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
    return path


def load_model(path: str | Path) -> MeshFreeModel:
    """Load a model archive written by save_model.

    Raises:
        FileNotFoundError: archive missing.
        ValueError: bad magic or malformed header.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model archive not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != _ARCHIVE_MAGIC:
        raise ValueError(f"{path} is not a model archive (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode())
    payload = raw[16 + hlen :]

    arrays = {}
    for item in header["arrays"]:
        buf = payload[item["offset"] : item["offset"] + item["nbytes"]]
        arrays[item["name"]] = np.frombuffer(buf, dtype=item["dtype"]).reshape(item["shape"])

    volume = VoxelVolume(
        dims=tuple(header["dims"]),
        spacing_mm=tuple(header["spacing_mm"]),
        kind=header["kind"],
        data=arrays["volume_data"],
    )
    mask = RoiMask(dims=volume.dims, flags=arrays["mask_flags"])
    field = MaterialField(volume=volume, mask=mask, nu=header["nu"], density=header["density"])
    dofs = DofSet(nodes=arrays["nodes"], owner=arrays["owner"])
    shape = ShapeMap(
        indices=arrays["shape_indices"].astype(np.int64),
        weights=arrays["shape_weights"],
        gradients=arrays["shape_gradients"],
        corrected_gradients=arrays["shape_corrected"],
        k=header["shape_k"],
    )
    n_dofs = 3 * dofs.n_nodes
    K = sp.csr_matrix(
        (arrays["K_data"], arrays["K_indices"], arrays["K_indptr"]), shape=(n_dofs, n_dofs)
    )
    C = sp.csr_matrix(
        (arrays["C_data"], arrays["C_indices"], arrays["C_indptr"]), shape=(n_dofs, n_dofs)
    )
    return MeshFreeModel(
        field=field,
        dofs=dofs,
        shape=shape,
        matrices=SystemMatrices(M=arrays["M"].copy(), K=K, C=C),
        q0=arrays["q0"].copy(),
        alpha=header["alpha"],
        beta=header["beta"],
        seed=header["seed"],
    )
