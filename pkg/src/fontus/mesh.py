"""Deformable surface mesh: extraction, simplification, energy refinement.

The refinement displaces each vertex along its (fixed) normal by a signed
scalar. The energy is internal (L1 mismatch of neighbor displacement
vectors) plus beta times external (ventricle-agreement reward P evaluated in
a small ball around each displaced vertex, with the displacement/threshold
logic of the deformable model). The optimizer works on a softened surrogate
(softplus hinges, blended branches) so limited-memory BFGS has gradients;
reported energies are the literal ones unless asked otherwise.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage, optimize
from skimage import measure

from .errors import EmptyLabelError, DegenerateGeometryError, NotWatertightError
from .registration import PTermParams
from .volume import LabelMap, Volume

BINARY_SMOOTH_SIGMA = 0.7  # voxel units; anti-aliases binary input before extraction


@dataclass(frozen=True)
class SurfaceMesh:
    vertices: np.ndarray  # (Nv, 3) mm, rest positions
    triangles: np.ndarray  # (Nt, 3) int
    normals: np.ndarray  # (Nv, 3) unit, outward
    displacements: np.ndarray = field(default=None)  # (Nv,) signed mm along normals

    def __post_init__(self):
        verts = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        tris = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64))
        if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
            raise ValueError("triangle indices out of range")
        normals = np.ascontiguousarray(np.asarray(self.normals, dtype=np.float64))
        disp = self.displacements
        disp = np.zeros(len(verts)) if disp is None else np.asarray(disp, dtype=np.float64)
        disp = np.ascontiguousarray(disp)
        if disp.shape != (len(verts),):
            raise ValueError("displacements must be one scalar per vertex")
        for arr in (verts, tris, normals, disp):
            arr.flags.writeable = False
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "displacements", disp)

    @property
    def displaced_vertices(self) -> np.ndarray:
        return self.vertices + self.displacements[:, None] * self.normals

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)


@dataclass(frozen=True)
class MeshEnergyParams:
    beta: float = 0.82
    alpha: float | None = None  # optional internal weight; None = plain E_I + beta E_E
    l: float = 2.0  # displacement threshold, mm (2 * V_k / V_M in the pipeline)
    tau: float = 0.5  # softplus temperature, intensity units
    p_initial_threshold: float = 0.4
    displacement_floor: float = 0.1  # mm, floors the 1/|d| branch
    gamma_blend: float = 0.1  # mm, width of the branch blending bands
    ball_radius_voxels: float = 2.0
    internal_smooth_delta: float = 0.02  # mm; smooths |.| in the softened internal energy

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must be in (0, 1]")
        if self.l <= 0 or self.tau <= 0:
            raise ValueError("l and tau must be positive")


# ---------------------------------------------------------------------------
# Mesh utilities
# ---------------------------------------------------------------------------

def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted face normals averaged per vertex, normalized."""
    v0 = vertices[triangles[:, 0]]
    v1 = vertices[triangles[:, 1]]
    v2 = vertices[triangles[:, 2]]
    face_n = np.cross(v1 - v0, v2 - v0)  # magnitude = 2 * area
    out = np.zeros_like(vertices)
    for c in range(3):
        np.add.at(out, triangles[:, c], face_n)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    norms[norms < 1e-12] = 1.0
    return out / norms


def is_watertight(mesh: SurfaceMesh) -> bool:
    """True when every edge is shared by exactly two triangles."""
    e = np.concatenate([mesh.triangles[:, [0, 1]], mesh.triangles[:, [1, 2]], mesh.triangles[:, [2, 0]]])
    e = np.sort(e, axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def enclosed_volume(mesh: SurfaceMesh, displaced: bool = False) -> float:
    """Signed-tetrahedron volume (positive for outward winding)."""
    verts = mesh.displaced_vertices if displaced else mesh.vertices
    v0 = verts[mesh.triangles[:, 0]]
    v1 = verts[mesh.triangles[:, 1]]
    v2 = verts[mesh.triangles[:, 2]]
    return float(np.sum(np.einsum("ij,ij->i", v0, np.cross(v1, v2))) / 6.0)


def surface_area(mesh: SurfaceMesh, displaced: bool = False) -> float:
    verts = mesh.displaced_vertices if displaced else mesh.vertices
    v0 = verts[mesh.triangles[:, 0]]
    v1 = verts[mesh.triangles[:, 1]]
    v2 = verts[mesh.triangles[:, 2]]
    return float(0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1).sum())


# ---------------------------------------------------------------------------
# Extraction / simplification / smoothing
# ---------------------------------------------------------------------------

def marching_cubes(label: LabelMap, iso: float = 0.5) -> SurfaceMesh:
    """Closed triangle surface of the label's iso level.

    Binary input is anti-aliased with a small fixed Gaussian before
    extraction (falling back to the raw indicator when the structure is too
    small to survive smoothing), which brings staircase area errors inside
    the tolerances. Output winding is consistent and outward.
    """
    fg = (label.data > 0).astype(np.float64)
    if not fg.any():
        raise EmptyLabelError("cannot extract a surface from an empty label")
    field_ = ndimage.gaussian_filter(fg, BINARY_SMOOTH_SIGMA)
    if field_.max() <= iso + 0.05:
        field_ = fg
    padded = np.pad(field_, 1, mode="constant")
    verts, faces, _, _ = measure.marching_cubes(padded, level=iso)
    verts = (verts - 1.0) * np.asarray(label.spacing) + np.asarray(label.origin)
    mesh = SurfaceMesh(verts, faces, np.zeros_like(verts))
    if enclosed_volume(mesh) < 0:
        faces = faces[:, ::-1]
        mesh = SurfaceMesh(verts, faces, np.zeros_like(verts))
    return replace(mesh, normals=vertex_normals(mesh.vertices, mesh.triangles))


@dataclass(frozen=True)
class DecimateResult:
    mesh: SurfaceMesh
    reached_target: bool


def decimate(mesh: SurfaceMesh, target_vertex_count: int) -> DecimateResult:
    """Shortest-edge collapse to the target vertex count.

    Collapses move both endpoints to the edge midpoint; a collapse is
    rejected if it would flip a surviving face normal or break the manifold
    link condition. Returns the best achievable mesh and whether the target
    was reached.
    """
    if target_vertex_count < 4:
        raise ValueError("target must be at least 4 vertices")
    n_start = len(mesh.vertices)
    if target_vertex_count >= n_start:
        return DecimateResult(mesh, True)

    verts = mesh.vertices.copy()
    faces = {i: tuple(f) for i, f in enumerate(mesh.triangles)}
    vert_faces: dict[int, set] = {i: set() for i in range(n_start)}
    for fi, f in faces.items():
        for v in f:
            vert_faces[v].add(fi)
    alive = np.ones(n_start, dtype=bool)

    def neighbors(u):
        out = set()
        for fi in vert_faces[u]:
            out.update(faces[fi])
        out.discard(u)
        return out

    heap = []
    counter = 0
    def push_edges_of(u):
        nonlocal counter
        for v in neighbors(u):
            a, b = (u, v) if u < v else (v, u)
            length = np.linalg.norm(verts[a] - verts[b])
            heapq.heappush(heap, (length, counter, a, b))
            counter += 1

    seen = set()
    for f in faces.values():
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            key = (a, b) if a < b else (b, a)
            if key not in seen:
                seen.add(key)
                length = np.linalg.norm(verts[key[0]] - verts[key[1]])
                heapq.heappush(heap, (length, counter, *key))
                counter += 1
    del seen

    n_alive = n_start
    while n_alive > target_vertex_count and heap:
        length, _, u, v = heapq.heappop(heap)
        if not (alive[u] and alive[v]):
            continue
        if abs(np.linalg.norm(verts[u] - verts[v]) - length) > 1e-9:
            continue  # stale entry
        shared = vert_faces[u] & vert_faces[v]
        if len(shared) != 2:
            continue  # border or non-manifold edge
        # link condition: exactly the two opposite vertices in common
        if len(neighbors(u) & neighbors(v)) != 2:
            continue
        mid = 0.5 * (verts[u] + verts[v])
        # reject collapses that flip or squash surviving faces
        ok = True
        for fi in (vert_faces[u] | vert_faces[v]) - shared:
            f = faces[fi]
            before = [verts[idx] for idx in f]
            after = [mid if idx in (u, v) else verts[idx] for idx in f]
            n_before = np.cross(before[1] - before[0], before[2] - before[0])
            n_after = np.cross(after[1] - after[0], after[2] - after[0])
            if np.dot(n_before, n_after) <= 1e-12:
                ok = False
                break
        if not ok:
            continue
        # apply collapse: v merges into u at the midpoint
        verts[u] = mid
        alive[v] = False
        n_alive -= 1
        for fi in shared:
            f = faces.pop(fi)
            for w in f:
                vert_faces[w].discard(fi)
        for fi in list(vert_faces[v]):
            f = faces[fi]
            faces[fi] = tuple(u if idx == v else idx for idx in f)
            vert_faces[u].add(fi)
            vert_faces[v].discard(fi)
        push_edges_of(u)

    remap = -np.ones(n_start, dtype=np.int64)
    keep = np.where(alive)[0]
    remap[keep] = np.arange(len(keep))
    new_faces = np.asarray([[remap[i] for i in f] for f in faces.values()], dtype=np.int64)
    new_verts = verts[keep]
    out = SurfaceMesh(new_verts, new_faces, vertex_normals(new_verts, new_faces))
    return DecimateResult(out, n_alive <= target_vertex_count)


def laplacian_smooth(mesh: SurfaceMesh, iterations: int, lam: float) -> SurfaceMesh:
    """Move each vertex toward its 1-ring centroid by ``lam`` per iteration."""
    if not 0.0 < lam < 1.0:
        raise ValueError("lambda must be in (0, 1)")
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if iterations == 0:
        return mesh
    verts = mesh.vertices.copy()
    edges = mesh.edges()
    n = len(verts)
    degree = np.zeros(n)
    np.add.at(degree, edges[:, 0], 1.0)
    np.add.at(degree, edges[:, 1], 1.0)
    degree[degree == 0] = 1.0
    for _ in range(iterations):
        acc = np.zeros_like(verts)
        np.add.at(acc, edges[:, 0], verts[edges[:, 1]])
        np.add.at(acc, edges[:, 1], verts[edges[:, 0]])
        centroid = acc / degree[:, None]
        verts = verts + lam * (centroid - verts)
    return SurfaceMesh(verts, mesh.triangles, vertex_normals(verts, mesh.triangles))


# ---------------------------------------------------------------------------
# Energies
# ---------------------------------------------------------------------------

def internal_energy(mesh: SurfaceMesh, displacements: np.ndarray | None = None) -> float:
    """Sum over edges of the L1 distance between endpoint displacement vectors."""
    s = mesh.displacements if displacements is None else np.asarray(displacements)
    d = s[:, None] * mesh.normals
    e = mesh.edges()
    return float(np.abs(d[e[:, 0]] - d[e[:, 1]]).sum())


def _internal_energy_grad(mesh: SurfaceMesh, s: np.ndarray, delta: float = 0.0) -> tuple[float, np.ndarray]:
    """L1 edge energy and gradient; ``delta`` > 0 smooths |x| as sqrt(x^2+d^2)-d
    (zero at zero, differentiable everywhere) for the optimizer's surrogate."""
    d = s[:, None] * mesh.normals
    e = mesh.edges()
    diff = d[e[:, 0]] - d[e[:, 1]]
    if delta > 0:
        root = np.sqrt(diff * diff + delta * delta)
        energy = float((root - delta).sum())
        sgn = diff / root
    else:
        energy = float(np.abs(diff).sum())
        sgn = np.sign(diff)
    grad = np.zeros_like(s)
    np.add.at(grad, e[:, 0], np.einsum("ij,ij->i", sgn, mesh.normals[e[:, 0]]))
    np.add.at(grad, e[:, 1], -np.einsum("ij,ij->i", sgn, mesh.normals[e[:, 1]]))
    return energy, grad


def _ball_offsets(radius_voxels: float) -> np.ndarray:
    r = int(np.floor(radius_voxels))
    rng = np.arange(-r, r + 1)
    di, dj, dk = np.meshgrid(rng, rng, rng, indexing="ij")
    mask = di * di + dj * dj + dk * dk <= radius_voxels * radius_voxels
    return np.stack([di[mask], dj[mask], dk[mask]], axis=1)


def _softplus(x: np.ndarray, tau: float) -> np.ndarray:
    z = x / tau
    return tau * np.logaddexp(0.0, z)


def vertex_p_values(us: Volume, positions_mm: np.ndarray, pterm: PTermParams,
                    radius_voxels: float = 2.0, tau: float | None = None) -> np.ndarray:
    """Ventricle-agreement reward P on the US voxels in a ball around each position.

    ``tau`` switches the hinge terms to softplus (the softened surrogate).
    Positions outside the grid are clamped to it, so N >= 1 always.
    """
    offsets = _ball_offsets(radius_voxels)
    idx = np.round((np.atleast_2d(positions_mm) - np.asarray(us.origin)) / np.asarray(us.spacing))
    idx = idx.astype(np.int64)
    nx, ny, nz = us.dims
    centers = np.clip(idx, 0, np.asarray([nx - 1, ny - 1, nz - 1]))
    pts = centers[:, None, :] + offsets[None, :, :]  # (Nv, Nb, 3)
    valid = np.all((pts >= 0) & (pts < np.asarray([nx, ny, nz])), axis=2)
    pts_c = np.clip(pts, 0, np.asarray([nx - 1, ny - 1, nz - 1]))
    vals = us.data[pts_c[..., 0], pts_c[..., 1], pts_c[..., 2]]
    valid &= vals != 0  # un-insonated voxels are not measurements
    mid = 0.5 * (pterm.i_low + pterm.i_high)
    eps = (vals < mid).astype(np.float64)
    if tau is None:
        hypo = np.maximum(pterm.i_low - vals, 0.0)
        hyper = np.maximum(vals - pterm.i_high, 0.0)
    else:
        hypo = _softplus(pterm.i_low - vals, tau)
        hyper = _softplus(vals - pterm.i_high, tau)
    contrib = np.where(valid, eps * hypo + (1.0 - eps) * hyper, 0.0)
    n = valid.sum(axis=1).astype(np.float64)
    out = (pterm.c1 * contrib.sum(axis=1) + pterm.c2) / np.maximum(n, 1.0)
    return np.where(n > 0, out, 0.0)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _smoothstep_d(t: np.ndarray) -> np.ndarray:
    inside = (t > 0.0) & (t < 1.0)
    return np.where(inside, 6.0 * t * (1.0 - t), 0.0)


def _external_terms(us: Volume, mesh: SurfaceMesh, s: np.ndarray, p_initial: np.ndarray,
                    pterm: PTermParams, ep: MeshEnergyParams,
                    softened: bool) -> tuple[float, np.ndarray]:
    """External energy and its gradient wrt the displacement scalars.

    P at the displaced position is treated as locally constant in s (the ball
    content only changes when the vertex crosses voxel-membership boundaries).
    """
    positions = mesh.vertices + s[:, None] * mesh.normals
    tau = ep.tau if softened else None
    p_t = vertex_p_values(us, positions, pterm, ep.ball_radius_voxels, tau)
    sqrt_pt = np.sqrt(np.maximum(p_t, 1e-12))
    floor = ep.displacement_floor
    abs_s = np.abs(s)

    # gamma and its derivative (blended over +/- gamma_blend/2 around l when softened)
    if softened:
        h = 0.5 * ep.gamma_blend
        t = (abs_s - (ep.l - h)) / (2.0 * h)
        w_gamma = _smoothstep(t)  # 0 -> gamma = 1, 1 -> gamma = 1/s^2
        dw_gamma = _smoothstep_d(np.clip(t, 0.0, 1.0)) / (2.0 * h)
    else:
        w_gamma = (abs_s >= ep.l).astype(np.float64)
        dw_gamma = np.zeros_like(s)
    inv_sq = 1.0 / np.maximum(abs_s, floor) ** 2
    gamma = (1.0 - w_gamma) + w_gamma * inv_sq
    d_inv_sq = np.where(abs_s > floor, -2.0 * np.sign(s) / np.maximum(abs_s, floor) ** 3, 0.0)
    d_gamma = dw_gamma * np.sign(s) * (inv_sq - 1.0) + w_gamma * d_inv_sq

    # branch-1 term: -sqrt(P_t) * s * gamma
    t1 = -sqrt_pt * s * gamma
    dt1 = -sqrt_pt * (gamma + s * d_gamma)
    # branch-2 term: -sqrt(P_t) * (1 / max(|s|, floor)) * gamma
    inv_abs = 1.0 / np.maximum(abs_s, floor)
    d_inv_abs = np.where(abs_s > floor, -np.sign(s) * inv_abs * inv_abs, 0.0)
    t2 = -sqrt_pt * inv_abs * gamma
    dt2 = -sqrt_pt * (d_inv_abs * gamma + inv_abs * d_gamma)

    if softened:
        w_p = 1.0 / (1.0 + np.exp(-(p_initial - ep.p_initial_threshold) / 0.02))
        ts = (s + ep.gamma_blend) / ep.gamma_blend
        w_s = _smoothstep(ts)
        dw_s = _smoothstep_d(np.clip(ts, 0.0, 1.0)) / ep.gamma_blend
        w1 = 1.0 - (1.0 - w_p) * (1.0 - w_s)
        dw1 = (1.0 - w_p) * dw_s
    else:
        branch1 = (p_initial >= ep.p_initial_threshold) | (s > 0) | (s == 0.0)
        w1 = branch1.astype(np.float64)
        dw1 = np.zeros_like(s)

    terms = w1 * t1 + (1.0 - w1) * t2
    dterms = w1 * dt1 + (1.0 - w1) * dt2 + dw1 * (t1 - t2)
    return float(terms.sum()), dterms


def external_energy(mesh: SurfaceMesh, us: Volume, pterm: PTermParams,
                    ep: MeshEnergyParams, displacements: np.ndarray | None = None,
                    softened: bool = False) -> float:
    """Literal (or softened) external energy of the current displacements."""
    s = mesh.displacements if displacements is None else np.asarray(displacements, dtype=np.float64)
    p0 = vertex_p_values(us, mesh.vertices, pterm, ep.ball_radius_voxels,
                         ep.tau if softened else None)
    value, _ = _external_terms(us, mesh, s, p0, pterm, ep, softened)
    return value


def total_energy(mesh: SurfaceMesh, us: Volume, pterm: PTermParams, ep: MeshEnergyParams,
                 displacements: np.ndarray | None = None, softened: bool = False) -> float:
    s = mesh.displacements if displacements is None else np.asarray(displacements, dtype=np.float64)
    e_i = internal_energy(mesh, s)
    e_e = external_energy(mesh, us, pterm, ep, s, softened)
    alpha = 1.0 if ep.alpha is None else ep.alpha
    return alpha * e_i + ep.beta * e_e


def softened_energy_and_grad(mesh: SurfaceMesh, us: Volume, pterm: PTermParams,
                             ep: MeshEnergyParams, s: np.ndarray,
                             p_initial: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    if p_initial is None:
        p_initial = vertex_p_values(us, mesh.vertices, pterm, ep.ball_radius_voxels, ep.tau)
    e_i, g_i = _internal_energy_grad(mesh, s, ep.internal_smooth_delta)
    e_e, g_e = _external_terms(us, mesh, s, p_initial, pterm, ep, softened=True)
    alpha = 1.0 if ep.alpha is None else ep.alpha
    return alpha * e_i + ep.beta * e_e, alpha * g_i + ep.beta * g_e


@dataclass(frozen=True)
class DeformResult:
    mesh: SurfaceMesh
    energy_trace: tuple[float, ...]  # softened energy at accepted iterates
    literal_energy: float
    converged: bool
    n_iterations: int


def deform_mesh(mesh: SurfaceMesh, us: Volume, pterm: PTermParams,
                ep: MeshEnergyParams, max_iters: int = 150) -> DeformResult:
    """Minimize the softened energy over per-vertex normal displacements (L-BFGS)."""
    p0 = vertex_p_values(us, mesh.vertices, pterm, ep.ball_radius_voxels, ep.tau)
    x0 = mesh.displacements.copy()

    def fun(x):
        return softened_energy_and_grad(mesh, us, pterm, ep, x, p0)

    trace = [fun(x0)[0]]

    def callback(xk):
        trace.append(fun(xk)[0])

    res = optimize.minimize(
        fun, x0, jac=True, method="L-BFGS-B", callback=callback,
        options={"maxiter": max_iters, "ftol": 1e-12, "gtol": 1e-8},
    )
    out = replace(mesh, displacements=res.x)
    return DeformResult(
        mesh=out,
        energy_trace=tuple(trace),
        literal_energy=total_energy(out, us, pterm, ep, softened=False),
        converged=bool(res.success),
        n_iterations=int(res.nit),
    )


# ---------------------------------------------------------------------------
# Voxelization
# ---------------------------------------------------------------------------

def mesh_to_label(mesh: SurfaceMesh, like: Volume | LabelMap, displaced: bool = True) -> LabelMap:
    """Voxel centers inside the (displaced) mesh via x-ray parity counting."""
    if not is_watertight(mesh):
        raise NotWatertightError("mesh_to_label requires a watertight mesh")
    verts_mm = mesh.displaced_vertices if displaced else mesh.vertices
    verts = (verts_mm - np.asarray(like.origin)) / np.asarray(like.spacing)
    tris = mesh.triangles
    nx, ny, nz = like.dims
    # tiny deterministic ray offset breaks edge/vertex coincidences
    ey, ez = 4.63e-4, 7.17e-4
    crossings: dict[tuple[int, int], list[float]] = {}
    v0, v1, v2 = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    for t in range(len(tris)):
        p0, p1, p2 = v0[t], v1[t], v2[t]
        ylo = int(np.ceil(min(p0[1], p1[1], p2[1]) - ey))
        yhi = int(np.floor(max(p0[1], p1[1], p2[1]) - ey))
        zlo = int(np.ceil(min(p0[2], p1[2], p2[2]) - ez))
        zhi = int(np.floor(max(p0[2], p1[2], p2[2]) - ez))
        if yhi < ylo or zhi < zlo:
            continue
        ys = np.arange(max(ylo, 0), min(yhi, ny - 1) + 1)
        zs = np.arange(max(zlo, 0), min(zhi, nz - 1) + 1)
        if len(ys) == 0 or len(zs) == 0:
            continue
        yy, zz = np.meshgrid(ys + ey, zs + ez, indexing="ij")
        # barycentric solve in the yz plane
        d00y, d00z = p1[1] - p0[1], p1[2] - p0[2]
        d01y, d01z = p2[1] - p0[1], p2[2] - p0[2]
        det = d00y * d01z - d01y * d00z
        if abs(det) < 1e-15:
            continue  # triangle parallel to the x axis; neighbors cover the ray
        wy = yy - p0[1]
        wz = zz - p0[2]
        lam1 = (wy * d01z - d01y * wz) / det
        lam2 = (d00y * wz - wy * d00z) / det
        inside = (lam1 >= 0.0) & (lam2 >= 0.0) & (lam1 + lam2 <= 1.0)
        if not inside.any():
            continue
        xc = p0[0] + lam1 * (p1[0] - p0[0]) + lam2 * (p2[0] - p0[0])
        ii, jj = np.nonzero(inside)
        for a, b in zip(ii, jj):
            crossings.setdefault((int(ys[a]), int(zs[b])), []).append(float(xc[a, b]))

    out = np.zeros((nx, ny, nz), dtype=np.uint8)
    for (j, k), xs in crossings.items():
        xs.sort()
        if len(xs) % 2 != 0:  # numerically grazing ray; drop the odd tail
            xs = xs[:-1]
        for a in range(0, len(xs), 2):
            i_lo = int(np.ceil(xs[a]))
            i_hi = int(np.floor(xs[a + 1]))
            if i_hi >= 0 and i_lo <= nx - 1:
                out[max(i_lo, 0):min(i_hi, nx - 1) + 1, j, k] = 1
    if not out.any():
        raise DegenerateGeometryError("mesh encloses no voxel centers")
    return LabelMap(out, like.spacing, like.origin)


# ---------------------------------------------------------------------------
# ASCII PLY I/O
# ---------------------------------------------------------------------------

def save_ply(mesh: SurfaceMesh, path) -> None:
    verts = mesh.displaced_vertices
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(verts)}",
        "property float x", "property float y", "property float z",
        "property float nx", "property float ny", "property float nz",
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for v, n in zip(verts, mesh.normals):
        lines.append(f"{v[0]:.8g} {v[1]:.8g} {v[2]:.8g} {n[0]:.8g} {n[1]:.8g} {n[2]:.8g}")
    for f in mesh.triangles:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_ply(path) -> SurfaceMesh:
    with open(path) as fh:
        tokens = fh.read().split("\n")
    n_verts = n_faces = 0
    i = 0
    while tokens[i].strip() != "end_header":
        parts = tokens[i].split()
        if parts[:2] == ["element", "vertex"]:
            n_verts = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_faces = int(parts[2])
        i += 1
    i += 1
    verts = np.zeros((n_verts, 3))
    normals = np.zeros((n_verts, 3))
    for v in range(n_verts):
        vals = [float(x) for x in tokens[i + v].split()]
        verts[v] = vals[:3]
        normals[v] = vals[3:6] if len(vals) >= 6 else 0.0
    faces = np.zeros((n_faces, 3), dtype=np.int64)
    for f in range(n_faces):
        vals = [int(x) for x in tokens[i + n_verts + f].split()]
        faces[f] = vals[1:4]
    if not normals.any():
        normals = vertex_normals(verts, faces)
    return SurfaceMesh(verts, faces, normals)
