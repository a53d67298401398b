"""Procedurally generated, region-labelled toy avatars.

Regions are assigned per triangle by predicates on the triangle centroid and
each region has its own appearance profile, so a segmentation can be scored
against the known labels.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .avatar import SH_COEFFS, SH_DIM, Avatar, Gaussians, Mesh, triangle_frames
from .render import SH_C0

MESH_KINDS = ("uv_sphere", "grid_patch")


@dataclass
class RegionProfile:
    """Appearance of one region and the predicate selecting its triangles.

    ``predicate`` is one of
    ``{"kind": "height", "lo": a, "hi": b}`` (normalised centroid height in [-1, 1]),
    ``{"kind": "boxes", "boxes": [[x0, y0, x1, y1], ...]}`` (patch uv in [0, 1]) or
    ``{"kind": "rest"}``.
    """

    name: str
    predicate: dict
    color: tuple = (0.5, 0.5, 0.5)
    sh_rest: float = 0.0
    sh_jitter: float = 0.05
    opacity_range: tuple = (0.6, 0.95)
    scale_range: tuple = (0.2, 0.4)  # local units, i.e. fractions of the triangle scale k

    def mean_sh(self) -> np.ndarray:
        sh = np.full((SH_COEFFS, 3), float(self.sh_rest))
        sh[0] = (np.asarray(self.color, dtype=np.float64) - 0.5) / SH_C0
        return sh.reshape(SH_DIM)


@dataclass
class SyntheticSpec:
    mesh_kind: str = "uv_sphere"
    resolution: tuple = (26, 32)  # sphere: (stacks, slices); patch: (cells_x, cells_y)
    size: float = 1.0  # sphere radius or patch side length
    bump: float = 0.25  # patch dome height as a fraction of size
    regions: list = field(default_factory=list)
    gaussians_per_triangle: int = 4
    normal_offset: float = 0.05  # bound on |offset| relative to the mean edge length
    margin: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.regions = [r if isinstance(r, RegionProfile) else RegionProfile(**r) for r in self.regions]
        self.resolution = tuple(self.resolution)
        if self.mesh_kind not in MESH_KINDS:
            raise ValueError(f"mesh_kind must be one of {MESH_KINDS}")
        if not self.regions:
            raise ValueError("spec needs at least one region")
        if self.gaussians_per_triangle < 1:
            raise ValueError("gaussians_per_triangle must be positive")
        if not 0 <= self.normal_offset <= 0.05:
            raise ValueError("normal offset is bounded by 5% of the mean edge length")
        means = [r.mean_sh() for r in self.regions]
        for i in range(len(means)):
            for j in range(i + 1, len(means)):
                d = np.linalg.norm(means[i] - means[j])
                if d < self.margin:
                    raise ValueError(f"regions {self.regions[i].name!r} and {self.regions[j].name!r} "
                                     f"are only {d:.3f} apart in sh space (margin {self.margin})")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)


def uv_sphere(stacks: int, slices: int, radius: float = 1.0) -> Mesh:
    if stacks < 3 or slices < 3:
        raise ValueError("sphere needs at least 3 stacks and 3 slices")
    verts = [(0.0, 0.0, radius)]
    for i in range(1, stacks):
        theta = np.pi * i / stacks
        for j in range(slices):
            phi = 2 * np.pi * j / slices
            verts.append((radius * np.sin(theta) * np.cos(phi), radius * np.sin(theta) * np.sin(phi),
                          radius * np.cos(theta)))
    verts.append((0.0, 0.0, -radius))
    south = len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * slices + j % slices

    tris = []
    for j in range(slices):
        tris.append((0, ring(1, j), ring(1, j + 1)))
    for i in range(1, stacks - 1):
        for j in range(slices):
            a, b, c, d = ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1)
            tris.append((a, c, d))
            tris.append((a, d, b))
    for j in range(slices):
        tris.append((ring(stacks - 1, j), south, ring(stacks - 1, j + 1)))
    return Mesh(np.array(verts), np.array(tris))


def grid_patch(nx: int, ny: int, size: float = 1.0, bump: float = 0.25) -> Mesh:
    """Square patch in the xy plane lifted into a shallow dome."""
    u, v = np.meshgrid(np.linspace(0, 1, nx + 1), np.linspace(0, 1, ny + 1), indexing="ij")
    r2 = ((2 * u - 1) ** 2 + (2 * v - 1) ** 2) / 2
    verts = np.stack([u * size, v * size, bump * size * (1 - r2)], axis=-1).reshape(-1, 3)
    idx = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[:-1, 1:].ravel(), idx[1:, 1:].ravel()
    tris = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
    return Mesh(verts, tris)


def build_mesh(spec: SyntheticSpec) -> Mesh:
    if spec.mesh_kind == "uv_sphere":
        return uv_sphere(*spec.resolution, radius=spec.size)
    return grid_patch(*spec.resolution, size=spec.size, bump=spec.bump)


def _matches(pred: dict, centroid: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    kind = pred.get("kind")
    if kind == "rest":
        return np.ones(len(centroid), dtype=bool)
    if kind == "height":
        h = centroid[:, 2] / spec.size
        return (h >= pred["lo"]) & (h < pred["hi"])
    if kind == "boxes":
        uv = centroid[:, :2] / spec.size
        hit = np.zeros(len(centroid), dtype=bool)
        for x0, y0, x1, y1 in pred["boxes"]:
            hit |= (uv[:, 0] >= x0) & (uv[:, 0] < x1) & (uv[:, 1] >= y0) & (uv[:, 1] < y1)
        return hit
    raise ValueError(f"unknown predicate kind {kind!r}")


def triangle_regions(spec: SyntheticSpec, mesh: Mesh) -> np.ndarray:
    """Region index per triangle; the first matching region wins."""
    centroid = mesh.vertices[mesh.triangles].mean(axis=1)
    region = np.full(mesh.n_triangles, -1, dtype=np.int64)
    for r, profile in enumerate(spec.regions):
        free = region < 0
        region[free & _matches(profile.predicate, centroid, spec)] = r
    if np.any(region < 0):
        raise ValueError(f"{int(np.sum(region < 0))} triangles are not covered by any region")
    counts = np.bincount(region, minlength=len(spec.regions))
    if np.any(counts == 0):
        empty = [spec.regions[i].name for i in np.flatnonzero(counts == 0)]
        raise ValueError(f"empty region(s): {empty}")
    return region


def _random_quaternions(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


def make_synthetic_avatar(spec: SyntheticSpec, name: str = "synthetic"):
    """Build a labelled avatar in triangle-local coordinates.

    Returns ``(avatar, truth)`` where ``truth`` is the region index of every
    Gaussian.
    """
    rng = np.random.default_rng(spec.seed)
    mesh = build_mesh(spec)
    tri_region = triangle_regions(spec, mesh)
    frames = triangle_frames(mesh)
    m = spec.gaussians_per_triangle
    binding = np.repeat(np.arange(mesh.n_triangles), m)
    n = len(binding)

    # barycentric sample + bounded offset along the face normal, in world space
    r1, r2 = rng.random(n), rng.random(n)
    flip = r1 + r2 > 1
    r1[flip], r2[flip] = 1 - r1[flip], 1 - r2[flip]
    tv = mesh.vertices[mesh.triangles[binding]]
    world = tv[:, 0] + r1[:, None] * (tv[:, 1] - tv[:, 0]) + r2[:, None] * (tv[:, 2] - tv[:, 0])
    f = frames[binding]
    offset = rng.uniform(-spec.normal_offset, spec.normal_offset, n) * f.k
    world = world + offset[:, None] * f.R[:, :, 1]
    mu_local = np.einsum("nji,nj->ni", f.R, world - f.T)

    truth = tri_region[binding]
    rot = _random_quaternions(rng, n)
    scale = np.empty((n, 3))
    opacity = np.empty(n)
    sh = np.empty((n, SH_DIM))
    for r, profile in enumerate(spec.regions):
        sel = truth == r
        cnt = int(sel.sum())
        scale[sel] = rng.uniform(*profile.scale_range, size=(cnt, 3))
        opacity[sel] = rng.uniform(*profile.opacity_range, size=cnt)
        sh[sel] = profile.mean_sh() + profile.sh_jitter * rng.normal(size=(cnt, SH_DIM))

    gaussians = Gaussians(mu_local, rot, scale, opacity, sh, binding)
    return Avatar(mesh, gaussians, space="local", name=name, frame_cache=frames), truth


def three_band_sphere_spec(seed: int = 0, stacks: int = 26, slices: int = 32,
                           gaussians_per_triangle: int = 4, sh_jitter: float = 0.05) -> SyntheticSpec:
    """Unit sphere split into cap / band / base latitude regions."""
    return SyntheticSpec(
        mesh_kind="uv_sphere", resolution=(stacks, slices), size=1.0,
        regions=[
            RegionProfile("cap", {"kind": "height", "lo": 0.35, "hi": 1.01}, color=(0.85, 0.25, 0.2),
                          sh_rest=0.1, sh_jitter=sh_jitter, opacity_range=(0.85, 0.99), scale_range=(0.15, 0.3)),
            RegionProfile("band", {"kind": "height", "lo": -0.35, "hi": 0.35}, color=(0.25, 0.8, 0.3),
                          sh_rest=-0.1, sh_jitter=sh_jitter, opacity_range=(0.5, 0.7), scale_range=(0.3, 0.5)),
            RegionProfile("base", {"kind": "rest"}, color=(0.2, 0.3, 0.85),
                          sh_rest=0.0, sh_jitter=sh_jitter, opacity_range=(0.7, 0.9), scale_range=(0.2, 0.4)),
        ],
        gaussians_per_triangle=gaussians_per_triangle, seed=seed)


# Patch geometry of the two-patch spec, in patch uv units.
BROW_BOXES = [[0.15, 0.6, 0.4, 0.76], [0.6, 0.6, 0.85, 0.76]]
SINGLE_BROW_BOX = [[0.15, 0.6, 0.85, 0.76]]


def make_disjoint_subparts_spec(seed: int = 0, cells: int = 50, size: float = 0.05,
                                single_patch: bool = False, gaussians_per_triangle: int = 4) -> SyntheticSpec:
    """Face-like patch with one region made of two disconnected pieces.

    Regions: "brows" (two separated boxes sharing one appearance), "mouth"
    (a horizontal band) and "skin" (everything else). Units follow a head
    mesh in metres, so the default clustering radius applies.
    ``single_patch`` joins the brows into one box as a control.
    """
    boxes = SINGLE_BROW_BOX if single_patch else BROW_BOXES
    return SyntheticSpec(
        mesh_kind="grid_patch", resolution=(cells, cells), size=size, bump=0.25,
        regions=[
            RegionProfile("brows", {"kind": "boxes", "boxes": boxes}, color=(0.15, 0.1, 0.05),
                          sh_rest=-0.05, opacity_range=(0.85, 0.99), scale_range=(0.1, 0.25)),
            RegionProfile("mouth", {"kind": "boxes", "boxes": [[0.3, 0.15, 0.7, 0.3]]}, color=(0.8, 0.2, 0.25),
                          sh_rest=0.05, opacity_range=(0.6, 0.8), scale_range=(0.2, 0.35)),
            RegionProfile("skin", {"kind": "rest"}, color=(0.9, 0.7, 0.55),
                          sh_rest=0.0, opacity_range=(0.7, 0.9), scale_range=(0.3, 0.5)),
        ],
        gaussians_per_triangle=gaussians_per_triangle, seed=seed)
