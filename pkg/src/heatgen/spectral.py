"""Spectral operators on triangle meshes.

Assembles the cotangent-weight stiffness matrix and barycentric lumped mass,
solves the sparse generalized eigenproblem L phi = lambda M phi for the k
smallest pairs, applies the spectral heat-kernel filter, and fits per-vertex
tangent-plane gradient operators. Operators are cached to disk in a compact
binary format keyed by mesh content hash.
"""

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
import scipy.sparse.linalg as sla

from .fields import SignalField
from .mesh import compute_tangent_frames, compute_vertex_normals

__all__ = [
    "SpectralOperators",
    "assemble_cotan_laplacian",
    "build_gradient_operator",
    "build_operators",
    "eigendecompose",
    "heat_filter",
    "load_operators",
    "read_cache_header",
    "save_operators",
]

COT_CLAMP = 50.0
GRAD_REGULARIZATION = 1e-8
EIG_TOL = 1e-8
DENSE_EIG_LIMIT = 2000


class EigensolverError(RuntimeError):
    """Raised when the iterative eigensolver fails to converge."""


@dataclass(frozen=True)
class SpectralOperators:
    """Precomputed spectral machinery for one mesh.

    Attributes
    ----------
    L : csr_matrix, (n, n)
        Cotangent stiffness, symmetric positive semidefinite convention.
    mass : (n,) float64
        Diagonal of the barycentric lumped mass matrix (area units).
    evals : (k,) float64
        Ascending nonnegative eigenvalues of L phi = lambda M phi.
    evecs : (n, k) float64
        M-orthonormal eigenvectors.
    grad : csr_matrix complex128, (n, n)
        Tangent gradient: (grad @ f)[i] = dX f + i * dY f at vertex i.
    mesh_hash : bytes
        The mesh content hash the operators were built from.
    """

    L: sparse.csr_matrix
    mass: np.ndarray
    evals: np.ndarray
    evecs: np.ndarray
    grad: sparse.csr_matrix
    mesh_hash: bytes

    @property
    def n(self):
        return self.L.shape[0]

    @property
    def k(self):
        return len(self.evals)

    @property
    def mesh_id(self):
        return self.mesh_hash.hex()


def assemble_cotan_laplacian(mesh, cot_clamp=COT_CLAMP):
    """Cotangent stiffness matrix and lumped mass vector.

    The weight of edge (i, j) is 0.5 * (cot a_ij + cot b_ij) summed over the
    incident faces, with cotangents clamped to [-cot_clamp, cot_clamp] to
    bound sliver triangles; the diagonal is the negated off-diagonal row sum.
    Mass is barycentric: one third of the incident face areas per vertex.

    Returns
    -------
    L : csr_matrix (n, n), positive-semidefinite sign convention
    mass : (n,) float64, diagonal of the lumped mass matrix
    """
    if mesh.n_faces == 0:
        raise ValueError("mesh has no faces; cannot assemble a Laplacian")
    v, f, areas = mesh.vertices, mesh.faces, mesh.face_areas
    n = mesh.n_vertices

    ok = areas > 0.0
    if not ok.all():
        warnings.warn(
            f"{np.count_nonzero(~ok)} zero-area face(s) skipped in "
            "cotangent assembly", stacklevel=2,
        )
    f = f[ok]
    areas = areas[ok]
    if not len(f):
        raise ValueError("all faces degenerate; cannot assemble a Laplacian")

    # cot of the angle at corner c = dot of the adjacent edges / (2 * area)
    rows, cols, vals = [], [], []
    for c in range(3):
        i, j, opp = f[:, (c + 1) % 3], f[:, (c + 2) % 3], f[:, c]
        e1 = v[i] - v[opp]
        e2 = v[j] - v[opp]
        cot = np.einsum("ij,ij->i", e1, e2) / (2.0 * areas)
        np.clip(cot, -cot_clamp, cot_clamp, out=cot)
        w = 0.5 * cot
        rows += [i, j]
        cols += [j, i]
        vals += [-w, -w]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)

    L = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    L.sum_duplicates()
    diag = -np.asarray(L.sum(axis=1)).ravel()
    L = L + sparse.diags(diag)

    mass = np.zeros(n, dtype=np.float64)
    share = areas / 3.0
    for c in range(3):
        np.add.at(mass, f[:, c], share)
    zero = mass <= 0.0
    if zero.any():
        warnings.warn(
            f"{np.count_nonzero(zero)} vertex(es) carry no area "
            "(isolated or only degenerate faces); mass floored", stacklevel=2,
        )
        mass[zero] = 1e-12 * mass[~zero].mean() if (~zero).any() else 1e-12
    return L.tocsr(), mass


def eigendecompose(L, mass, k, method="auto", tol=EIG_TOL, seed=0):
    """The k algebraically smallest generalized eigenpairs of L phi = lam M phi.

    Parameters
    ----------
    method : {"auto", "dense", "iterative"}
        "auto" uses a dense solve for n <= 2000 (and whenever k == n),
        shift-invert Lanczos otherwise.
    tol : float
        Residual tolerance of the iterative solver.
    seed : int
        Seeds the Lanczos starting vector; results are deterministic given
        the seed (eigenvector signs are additionally fixed canonically).

    Returns
    -------
    evals : (k,) ascending, clipped to be nonnegative
    evecs : (n, k) M-orthonormal
    """
    n = L.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if method not in ("auto", "dense", "iterative"):
        raise ValueError(f"unknown eigensolver method '{method}'")
    if method == "auto":
        method = "dense" if n <= DENSE_EIG_LIMIT else "iterative"
    if k == n and method == "iterative":
        method = "dense"  # Lanczos requires k < n

    if method == "dense":
        evals, evecs = scipy.linalg.eigh(
            L.toarray(), np.diag(mass), subset_by_index=[0, k - 1]
        )
    else:
        M = sparse.diags(mass).tocsc()
        # Shift slightly negative so L - sigma*M is positive definite even
        # though lambda_0 = 0; the k eigenvalues nearest sigma are then
        # exactly the k smallest.
        scale = L.diagonal().sum() / mass.sum()
        sigma = -1e-4 * max(scale, np.finfo(np.float64).tiny)
        rng = np.random.default_rng(seed)
        v0 = rng.uniform(-0.5, 0.5, size=n)
        try:
            evals, evecs = sla.eigsh(
                L.tocsc(), k=k, M=M, sigma=sigma, which="LM",
                v0=v0, tol=tol, maxiter=max(10 * k, 100),
            )
        except sla.ArpackNoConvergence as exc:
            raise EigensolverError(
                f"eigensolver converged only {len(exc.eigenvalues)}/{k} "
                f"pairs within the iteration cap"
            ) from exc

    order = np.argsort(evals, kind="stable")
    evals = evals[order]
    evecs = evecs[:, order]
    lam_scale = max(abs(evals[-1]), 1.0)
    if evals[0] < -1e-8 * lam_scale:
        warnings.warn(
            f"clipping negative eigenvalue {evals[0]:.3e} to zero "
            "(clamped sliver triangles can perturb semidefiniteness)",
            stacklevel=2,
        )
    np.clip(evals, 0.0, None, out=evals)

    # canonical sign: largest-magnitude entry of each column is positive
    pick = np.abs(evecs).argmax(axis=0)
    signs = np.sign(evecs[pick, np.arange(evecs.shape[1])])
    signs[signs == 0] = 1.0
    evecs = np.ascontiguousarray(evecs * signs)
    return evals, evecs


def heat_filter(f, times, ops):
    """Spectral heat-kernel filter: per channel c, Phi e^{-Lam s_c} Phi^T M f_c.

    ``times`` is a scalar or per-channel array of nonnegative diffusion
    times; frequency lambda_i decays by e^{-s * lambda_i}. Accepts a
    SignalField or a bare (n, c) array and returns the same kind.
    """
    as_field = isinstance(f, SignalField)
    if as_field:
        f.require_mesh(ops.mesh_id)
        values = f.values
    else:
        values = np.asarray(f, dtype=np.float64)
    squeeze = values.ndim == 1
    if squeeze:
        values = values[:, None]
    if values.shape[0] != ops.n:
        raise ValueError(f"field has {values.shape[0]} rows, mesh has {ops.n} vertices")
    c = values.shape[1]
    times = np.asarray(times, dtype=np.float64)
    if times.ndim == 0:
        times = np.full(c, float(times))
    if times.shape != (c,):
        raise ValueError(f"expected {c} diffusion times, got shape {times.shape}")
    if (times < 0.0).any():
        raise ValueError("diffusion times must be nonnegative (heat runs forward only)")

    coeff = ops.evecs.T @ (ops.mass[:, None] * values)  # (k, c)
    decay = np.exp(-ops.evals[:, None] * times[None, :])  # (k, c)
    out = ops.evecs @ (decay * coeff)
    if squeeze:
        out = out[:, 0]
    return f.with_values(out) if as_field else out


def build_gradient_operator(mesh, frames=None, reg=GRAD_REGULARIZATION):
    """Per-vertex tangent-gradient operator as a sparse complex matrix.

    Row i holds least-squares weights fitting the tangential gradient from
    one-ring edge differences projected into the tangent plane; (G f)[i]
    encodes dX + i dY. The 2x2 normal equations get ``reg * I`` added.

    Raises
    ------
    ValueError
        If some vertex has fewer than 2 neighbors or its projected one-ring
        is collinear (rank-deficient fit), naming the vertex.
    """
    if frames is None:
        frames = compute_tangent_frames(mesh)
    n = mesh.n_vertices
    indptr, indices = mesh.adjacency_csr
    degree = np.diff(indptr)
    if (degree < 2).any():
        i = int(np.flatnonzero(degree < 2)[0])
        raise ValueError(f"vertex {i} has {degree[i]} neighbor(s); gradient fit needs >= 2")

    rows = np.repeat(np.arange(n), degree)
    cols = indices
    edge = mesh.vertices[cols] - mesh.vertices[rows]
    u1 = np.einsum("ij,ij->i", edge, frames.x_axes[rows])
    u2 = np.einsum("ij,ij->i", edge, frames.y_axes[rows])

    s11 = np.bincount(rows, weights=u1 * u1, minlength=n)
    s12 = np.bincount(rows, weights=u1 * u2, minlength=n)
    s22 = np.bincount(rows, weights=u2 * u2, minlength=n)

    # smallest eigenvalue of the unregularized 2x2 system flags collinear rings
    half_tr = 0.5 * (s11 + s22)
    disc = np.sqrt(np.maximum(0.25 * (s11 - s22) ** 2 + s12 ** 2, 0.0))
    lam_min = half_tr - disc
    lam_max = half_tr + disc
    deficient = lam_min <= 1e-10 * np.maximum(lam_max, 1e-300)
    if deficient.any():
        i = int(np.flatnonzero(deficient)[0])
        raise ValueError(
            f"vertex {i}: projected one-ring neighbors are collinear; "
            "gradient fit is rank-deficient"
        )

    det = (s11 + reg) * (s22 + reg) - s12 * s12
    inv11 = (s22 + reg) / det
    inv22 = (s11 + reg) / det
    inv12 = -s12 / det

    wx = inv11[rows] * u1 + inv12[rows] * u2
    wy = inv12[rows] * u1 + inv22[rows] * u2
    w = wx + 1j * wy

    diag = -np.bincount(rows, weights=wx, minlength=n) \
        - 1j * np.bincount(rows, weights=wy, minlength=n)
    G = sparse.coo_matrix(
        (np.concatenate([w, diag]),
         (np.concatenate([rows, np.arange(n)]), np.concatenate([cols, np.arange(n)]))),
        shape=(n, n), dtype=np.complex128,
    ).tocsr()
    G.sum_duplicates()
    return G


def build_operators(mesh, k, method="auto", tol=EIG_TOL, seed=0):
    """Assemble, eigendecompose, and fit gradients for one mesh."""
    L, mass = assemble_cotan_laplacian(mesh)
    evals, evecs = eigendecompose(L, mass, k, method=method, tol=tol, seed=seed)
    normals = compute_vertex_normals(mesh)
    frames = compute_tangent_frames(mesh, normals)
    grad = build_gradient_operator(mesh, frames)
    return SpectralOperators(
        L=L, mass=mass, evals=evals, evecs=evecs, grad=grad,
        mesh_hash=mesh.content_hash,
    )


# ---------------------------------------------------------------------------
# Operator cache file ("HGOP")
# ---------------------------------------------------------------------------

OPCACHE_MAGIC = b"HGOP"
OPCACHE_VERSION = 1
_HEADER = struct.Struct("<4sIII32s")


def _write_csr(fh, mat):
    fh.write(mat.indptr.astype("<u8").tobytes())
    fh.write(mat.indices.astype("<u4").tobytes())
    fh.write(np.ascontiguousarray(mat.data).tobytes())


def _read_csr(fh, n, dtype):
    indptr = np.frombuffer(fh.read(8 * (n + 1)), dtype="<u8").astype(np.int64)
    nnz = int(indptr[-1])
    indices = np.frombuffer(fh.read(4 * nnz), dtype="<u4").astype(np.int32)
    itemsize = np.dtype(dtype).itemsize
    data = np.frombuffer(fh.read(itemsize * nnz), dtype=dtype)
    return sparse.csr_matrix((data.copy(), indices, indptr), shape=(n, n))


def save_operators(ops, path):
    """Write the operator cache; atomic (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    L = ops.L.tocsr()
    L.sort_indices()
    G = ops.grad.tocsr()
    G.sort_indices()
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(OPCACHE_MAGIC, OPCACHE_VERSION, ops.n, ops.k,
                              ops.mesh_hash))
        _write_csr(fh, L)
        fh.write(ops.mass.astype("<f8").tobytes())
        fh.write(ops.evals.astype("<f8").tobytes())
        fh.write(ops.evecs.astype("<f8").tobytes(order="F"))  # column-major
        _write_csr(fh, G)
    tmp.replace(path)


def load_operators(path):
    path = Path(path)
    with open(path, "rb") as fh:
        magic, version, n, k, mesh_hash = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != OPCACHE_MAGIC:
            raise ValueError(f"{path}: not an operator cache file")
        if version != OPCACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        L = _read_csr(fh, n, "<f8")
        mass = np.frombuffer(fh.read(8 * n), dtype="<f8").copy()
        evals = np.frombuffer(fh.read(8 * k), dtype="<f8").copy()
        evecs = np.frombuffer(fh.read(8 * n * k), dtype="<f8").reshape(
            (n, k), order="F").copy()
        G = _read_csr(fh, n, "<c16")
    return SpectralOperators(L=L, mass=mass, evals=evals, evecs=evecs,
                             grad=G, mesh_hash=mesh_hash)


def read_cache_header(path):
    """Read (version, n, k, mesh_hash) without loading the payload."""
    with open(path, "rb") as fh:
        magic, version, n, k, mesh_hash = _HEADER.unpack(fh.read(_HEADER.size))
    if magic != OPCACHE_MAGIC:
        raise ValueError(f"{path}: not an operator cache file")
    return version, n, k, mesh_hash
