"""Triangle-rigged Gaussian avatars and the triangle-local <-> global transforms.

Gaussians are stored column-wise (one array per field) so that every
transform is vectorised over the whole avatar. Quaternions are Hamilton,
scalar first ``(w, x, y, z)``. Scales and opacities are linear in memory;
the log / logit encodings only exist on disk.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateTriangle

SH_COEFFS = 16
SH_DIM = SH_COEFFS * 3
MIN_TRIANGLE_AREA = 1e-12


# ---------------------------------------------------------------------------
# quaternion helpers

def quat_multiply(a, b):
    """Hamilton product ``a * b`` for (..., 4) arrays."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q):
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=-2)


def rotmat_to_quat(R):
    """Unit quaternion of a rotation matrix (Shepperd's method).

    The sign is fixed so that ``w >= 0``; when ``w == 0`` the first non-zero
    vector component is made positive, starting with ``x``.
    """
    R = np.asarray(R, dtype=np.float64)
    batch = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    m00, m11, m22 = R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]
    trace = m00 + m11 + m22
    q = np.empty((R.shape[0], 4))
    case = np.argmax(np.stack([trace, m00, m11, m22], axis=-1), axis=-1)

    i = case == 0
    s = 2.0 * np.sqrt(1.0 + trace[i])
    q[i] = np.stack([0.25 * s, (R[i, 2, 1] - R[i, 1, 2]) / s,
                     (R[i, 0, 2] - R[i, 2, 0]) / s, (R[i, 1, 0] - R[i, 0, 1]) / s], -1)
    i = case == 1
    s = 2.0 * np.sqrt(1.0 + m00[i] - m11[i] - m22[i])
    q[i] = np.stack([(R[i, 2, 1] - R[i, 1, 2]) / s, 0.25 * s,
                     (R[i, 0, 1] + R[i, 1, 0]) / s, (R[i, 0, 2] + R[i, 2, 0]) / s], -1)
    i = case == 2
    s = 2.0 * np.sqrt(1.0 - m00[i] + m11[i] - m22[i])
    q[i] = np.stack([(R[i, 0, 2] - R[i, 2, 0]) / s, (R[i, 0, 1] + R[i, 1, 0]) / s,
                     0.25 * s, (R[i, 1, 2] + R[i, 2, 1]) / s], -1)
    i = case == 3
    s = 2.0 * np.sqrt(1.0 - m00[i] - m11[i] + m22[i])
    q[i] = np.stack([(R[i, 1, 0] - R[i, 0, 1]) / s, (R[i, 0, 2] + R[i, 2, 0]) / s,
                     (R[i, 1, 2] + R[i, 2, 1]) / s, 0.25 * s], -1)

    q = quat_normalize(q)
    # canonical sign: first non-zero of (w, x, y, z) positive
    lead = np.where(q != 0.0, q, 0.0)
    first = np.argmax(lead != 0.0, axis=-1)
    sign = np.sign(lead[np.arange(len(q)), first])
    sign[sign == 0] = 1.0
    q *= sign[:, None]
    return q.reshape(batch + (4,))


# ---------------------------------------------------------------------------
# data model

@dataclass
class Gaussians:
    """A set of Gaussian components, one row per splat.

    mu: (N, 3) positions; rot: (N, 4) quaternions; scale: (N, 3) positive;
    opacity: (N,) in (0, 1); sh: (N, 48) as 16 coefficients x 3 channels
    (coefficient-major); binding: (N,) parent triangle index.
    """

    mu: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray
    binding: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(-1, 4)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(-1, 3)
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(-1)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(-1, SH_DIM)
        self.binding = np.asarray(self.binding, dtype=np.int64).reshape(-1)
        n = len(self.mu)
        for name in ("rot", "scale", "opacity", "sh", "binding"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"field {name!r} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self):
        return len(self.mu)

    def __getitem__(self, idx) -> "Gaussians":
        if isinstance(idx, (int, np.integer)):
            idx = [idx]
        return Gaussians(self.mu[idx], self.rot[idx], self.scale[idx],
                         self.opacity[idx], self.sh[idx], self.binding[idx])

    @classmethod
    def empty(cls) -> "Gaussians":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                   np.zeros(0), np.zeros((0, SH_DIM)), np.zeros(0, dtype=np.int64))

    @classmethod
    def concat(cls, parts) -> "Gaussians":
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("mu", "rot", "scale", "opacity", "sh", "binding")))

    def copy(self) -> "Gaussians":
        return Gaussians(self.mu.copy(), self.rot.copy(), self.scale.copy(),
                         self.opacity.copy(), self.sh.copy(), self.binding.copy())

    def validate(self, n_triangles: int | None = None) -> None:
        """Raise ``ValueError`` if any field violates its invariant."""
        for name in ("mu", "rot", "scale", "opacity", "sh"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name!r}")
        if np.any(self.scale <= 0):
            raise ValueError("scales must be strictly positive")
        if np.any((self.opacity < 0) | (self.opacity > 1)):
            raise ValueError("opacity outside [0, 1]")
        if np.any(np.linalg.norm(self.rot, axis=1) == 0):
            raise ValueError("zero-norm quaternion")
        if np.any(self.binding < 0):
            raise ValueError("negative triangle binding")
        if n_triangles is not None and np.any(self.binding >= n_triangles):
            raise ValueError(f"binding out of range for a mesh with {n_triangles} triangles")


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "triangles", np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3))
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle references a missing vertex")

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def same_topology(self, other: "Mesh") -> bool:
        return self.triangles.shape == other.triangles.shape and np.array_equal(self.triangles, other.triangles)


@dataclass(frozen=True)
class TriangleFrame:
    """Rigid frame plus uniform scale of a triangle; arrays may be batched.

    R: (..., 3, 3) rotation, T: (..., 3) centre, k: (...) scale.
    """

    R: np.ndarray
    T: np.ndarray
    k: np.ndarray

    def __getitem__(self, idx) -> "TriangleFrame":
        return TriangleFrame(self.R[idx], self.T[idx], self.k[idx])

    def __len__(self):
        return len(self.T) if np.ndim(self.T) > 1 else 1

    @classmethod
    def identity(cls) -> "TriangleFrame":
        return cls(np.eye(3), np.zeros(3), np.float64(1.0))


def triangle_frames(mesh: Mesh, tris=None) -> TriangleFrame:
    """Frames for the given triangle indices (all triangles by default).

    Columns of R are the normalised first edge, the unit face normal and
    their cross product; T is the vertex centroid; k the mean edge length.
    """
    tri_idx = np.arange(mesh.n_triangles) if tris is None else np.asarray(tris)
    v = mesh.vertices[mesh.triangles[tri_idx]]
    v0, v1, v2 = v[..., 0, :], v[..., 1, :], v[..., 2, :]
    e1, e2 = v1 - v0, v2 - v0
    normal = np.cross(e1, e2)
    area2 = np.linalg.norm(normal, axis=-1)
    bad = area2 <= 2 * MIN_TRIANGLE_AREA
    if np.any(bad):
        which = np.atleast_1d(tri_idx)[np.atleast_1d(bad)]
        raise DegenerateTriangle(f"degenerate triangle(s): {which[:10].tolist()}")
    t = e1 / np.linalg.norm(e1, axis=-1, keepdims=True)
    n = normal / area2[..., None]
    b = np.cross(t, n)
    R = np.stack([t, n, b], axis=-1)
    T = (v0 + v1 + v2) / 3.0
    k = (np.linalg.norm(e1, axis=-1) + np.linalg.norm(v2 - v1, axis=-1)
         + np.linalg.norm(e2, axis=-1)) / 3.0
    return TriangleFrame(R, T, k)


def triangle_frame(mesh: Mesh, tri: int) -> TriangleFrame:
    if not 0 <= tri < mesh.n_triangles:
        raise IndexError(f"triangle {tri} out of range")
    return triangle_frames(mesh, tri)


def local_to_global(g: Gaussians, frame: TriangleFrame, scale_position: bool = False) -> Gaussians:
    """Map triangle-local parameters to world space.

    ``frame`` is either a single frame or one frame per Gaussian. With
    ``scale_position`` the offset is also scaled by k before rotation.
    """
    R, T, k = frame.R, frame.T, np.asarray(frame.k, dtype=np.float64)
    mu = np.einsum("...ij,...j->...i", R, g.mu)
    if scale_position:
        mu = mu * k[..., None]
    mu = mu + T
    q = rotmat_to_quat(R)
    rot = quat_normalize(quat_multiply(q, g.rot))
    scale = g.scale * k[..., None]
    return Gaussians(mu, rot, scale, g.opacity.copy(), g.sh.copy(), g.binding.copy())


def global_to_local(g: Gaussians, frame: TriangleFrame, scale_position: bool = False) -> Gaussians:
    """Exact inverse of :func:`local_to_global`."""
    R, T, k = frame.R, frame.T, np.asarray(frame.k, dtype=np.float64)
    mu = np.einsum("...ji,...j->...i", R, g.mu - T)
    if scale_position:
        mu = mu / k[..., None]
    q = quat_conjugate(rotmat_to_quat(R))
    rot = quat_normalize(quat_multiply(q, g.rot))
    scale = g.scale / k[..., None]
    return Gaussians(mu, rot, scale, g.opacity.copy(), g.sh.copy(), g.binding.copy())


@dataclass
class Avatar:
    mesh: Mesh
    gaussians: Gaussians
    space: str = "local"
    name: str = "avatar"
    frame_cache: TriangleFrame | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.space not in ("local", "global"):
            raise ValueError(f"unknown coordinate space {self.space!r}")
        self.gaussians.validate(self.mesh.n_triangles)
        if self.frame_cache is not None and len(self.frame_cache) != self.mesh.n_triangles:
            raise ValueError("frame cache must hold one frame per triangle")

    def __len__(self):
        return len(self.gaussians)

    @property
    def frames(self) -> TriangleFrame:
        if self.frame_cache is None:
            self.frame_cache = triangle_frames(self.mesh)
        return self.frame_cache

    def with_gaussians(self, gaussians: Gaussians, space: str | None = None) -> "Avatar":
        return replace(self, gaussians=gaussians, space=space or self.space)


def to_global_space(avatar: Avatar, scale_position: bool = False) -> Avatar:
    if avatar.space == "global":
        return avatar
    frames = avatar.frames[avatar.gaussians.binding]
    return avatar.with_gaussians(local_to_global(avatar.gaussians, frames, scale_position), "global")


def to_local_space(avatar: Avatar, scale_position: bool = False) -> Avatar:
    if avatar.space == "local":
        return avatar
    frames = avatar.frames[avatar.gaussians.binding]
    return avatar.with_gaussians(global_to_local(avatar.gaussians, frames, scale_position), "local")
