import numpy as np
import pytest

from splatparts.avatar import SH_DIM, Avatar, Gaussians, Mesh, TriangleFrame


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_gaussians(rng, n, n_triangles=1):
    rot = rng.normal(size=(n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    return Gaussians(
        mu=rng.normal(size=(n, 3)),
        rot=rot,
        scale=rng.uniform(0.05, 2.0, size=(n, 3)),
        opacity=rng.uniform(0.01, 0.99, size=n),
        sh=rng.normal(size=(n, SH_DIM)),
        binding=rng.integers(0, n_triangles, size=n),
    )


def random_frames(rng, n):
    R = np.stack([random_rotation(rng) for _ in range(n)])
    return TriangleFrame(R, rng.normal(size=(n, 3)), rng.uniform(0.1, 3.0, size=n))


def tiny_avatar(gaussians_per_tri=(2, 3, 1), seed=0):
    """Three-triangle strip with a handful of Gaussians, local space."""
    rng = np.random.default_rng(seed)
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.2], [2, 0, 0.1]], dtype=float)
    tris = np.array([[0, 1, 2], [1, 3, 2], [1, 4, 3]])
    mesh = Mesh(verts, tris)
    binding = np.repeat(np.arange(3), gaussians_per_tri)
    g = random_gaussians(rng, len(binding), 3)
    g.binding = binding
    g.mu *= 0.1
    g.scale *= 0.1
    return Avatar(mesh, g, "local", "tiny")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
