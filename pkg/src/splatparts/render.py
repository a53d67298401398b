"""Small CPU splat rasteriser for previews and segment overlays.

Gaussians are projected with a pinhole camera, their covariance mapped to
the image plane with the usual local-affine (EWA) approximation, sorted
back-to-front and composited with the "over" operator. Meant for a few tens
of thousands of splats at preview resolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .avatar import Avatar, quat_to_rotmat, to_global_space

# real spherical harmonics basis constants, degrees 0..3
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)

LOW_PASS = 0.3  # pixel^2 added to every 2D covariance
NEAR = 1e-2
NOISE_GRAY = (0.5, 0.5, 0.5)
PALETTE = np.array([
    (0.122, 0.467, 0.706), (1.000, 0.498, 0.055), (0.173, 0.627, 0.173), (0.839, 0.153, 0.157),
    (0.580, 0.404, 0.741), (0.549, 0.337, 0.294), (0.890, 0.467, 0.761), (0.737, 0.741, 0.133),
    (0.090, 0.745, 0.812), (0.969, 0.714, 0.824),
])


@dataclass(frozen=True)
class Camera:
    position: tuple
    target: tuple
    up: tuple = (0.0, 0.0, 1.0)
    fov_y: float = 40.0
    width: int = 128
    height: int = 128

    def __post_init__(self):
        if not 0 < self.fov_y < 180:
            raise ValueError("fov_y must lie in (0, 180) degrees")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        fwd = np.subtract(self.target, self.position)
        if np.linalg.norm(np.cross(fwd, self.up)) < 1e-12:
            raise ValueError("view direction and up vector are collinear")

    def world_to_camera(self):
        """Rotation rows (right, down, forward) and the camera position."""
        pos = np.asarray(self.position, dtype=np.float64)
        fwd = np.asarray(self.target, dtype=np.float64) - pos
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return np.stack([right, down, fwd]), pos

    @property
    def focal(self) -> float:
        return 0.5 * self.height / np.tan(np.radians(self.fov_y) / 2)


@dataclass
class RenderStats:
    drawn: int = 0
    behind_camera: int = 0
    off_screen: int = 0


def eval_sh(sh, dirs, degree: int = 3):
    """RGB radiance of coefficient-major (N, 16*3) sh along unit ``dirs``."""
    if not 0 <= degree <= 3:
        raise ValueError("sh degree must be in 0..3")
    c = np.asarray(sh, dtype=np.float64).reshape(len(sh), 16, 3)
    out = SH_C0 * c[:, 0]
    if degree == 0:
        return out
    x, y, z = (dirs[:, i:i + 1] for i in range(3))
    out = out - SH_C1 * y * c[:, 1] + SH_C1 * z * c[:, 2] - SH_C1 * x * c[:, 3]
    if degree == 1:
        return out
    xx, yy, zz, xy, yz, xz = x * x, y * y, z * z, x * y, y * z, x * z
    out = (out + SH_C2[0] * xy * c[:, 4] + SH_C2[1] * yz * c[:, 5]
           + SH_C2[2] * (2 * zz - xx - yy) * c[:, 6] + SH_C2[3] * xz * c[:, 7]
           + SH_C2[4] * (xx - yy) * c[:, 8])
    if degree == 2:
        return out
    return (out + SH_C3[0] * y * (3 * xx - yy) * c[:, 9] + SH_C3[1] * xy * z * c[:, 10]
            + SH_C3[2] * y * (4 * zz - xx - yy) * c[:, 11]
            + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * c[:, 12]
            + SH_C3[4] * x * (4 * zz - xx - yy) * c[:, 13] + SH_C3[5] * z * (xx - yy) * c[:, 14]
            + SH_C3[6] * x * (xx - 3 * yy) * c[:, 15])


def _splat(gaussians, colors, camera: Camera, background, stats: RenderStats | None):
    stats = stats if stats is not None else RenderStats()
    H, W = camera.height, camera.width
    image = np.empty((H, W, 3))
    image[:] = np.asarray(background, dtype=np.float64)
    if len(gaussians) == 0:
        return image

    Rw, cam_pos = camera.world_to_camera()
    p = (gaussians.mu - cam_pos) @ Rw.T
    z = p[:, 2]
    front = z > NEAR
    stats.behind_camera += int(np.sum(~front))

    f = camera.focal
    cx, cy = W / 2.0, H / 2.0
    idx = np.flatnonzero(front)
    p, z = p[idx], z[idx]
    u = f * p[:, 0] / z + cx
    v = f * p[:, 1] / z + cy

    Rg = quat_to_rotmat(gaussians.rot[idx])
    S2 = gaussians.scale[idx] ** 2
    cov3 = np.einsum("nij,nj,nkj->nik", Rg, S2, Rg)
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = f / z
    J[:, 0, 2] = -f * p[:, 0] / z ** 2
    J[:, 1, 1] = f / z
    J[:, 1, 2] = -f * p[:, 1] / z ** 2
    M = J @ Rw
    cov2 = M @ cov3 @ np.transpose(M, (0, 2, 1))
    cov2[:, 0, 0] += LOW_PASS
    cov2[:, 1, 1] += LOW_PASS
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    inv_a, inv_b, inv_c = c / det, -b / det, a / det
    rx = 3.0 * np.sqrt(a)
    ry = 3.0 * np.sqrt(c)

    opacity = gaussians.opacity[idx]
    col = colors[idx]
    # back to front; stable sort keeps index order among equal depths
    order = np.argsort(-z, kind="stable")
    for i in order:
        x0, x1 = int(np.floor(u[i] - rx[i])), int(np.ceil(u[i] + rx[i]))
        y0, y1 = int(np.floor(v[i] - ry[i])), int(np.ceil(v[i] + ry[i]))
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, W - 1), min(y1, H - 1)
        if x0 > x1 or y0 > y1:
            stats.off_screen += 1
            continue
        dx = np.arange(x0, x1 + 1) + 0.5 - u[i]
        dy = np.arange(y0, y1 + 1) + 0.5 - v[i]
        d2 = inv_a[i] * dx[None, :] ** 2 + 2 * inv_b[i] * dx[None, :] * dy[:, None] + inv_c[i] * dy[:, None] ** 2
        alpha = np.where(d2 <= 9.0, opacity[i] * np.exp(-0.5 * d2), 0.0)[..., None]
        tile = image[y0:y1 + 1, x0:x1 + 1]
        tile *= 1.0 - alpha
        tile += alpha * col[i]
        stats.drawn += 1
    return np.clip(image, 0.0, 1.0)


def render(avatar: Avatar, camera: Camera, sh_degree: int = 3, background=(0.0, 0.0, 0.0),
           stats: RenderStats | None = None) -> np.ndarray:
    """Render an avatar to an (H, W, 3) float image in [0, 1]."""
    g = to_global_space(avatar).gaussians
    if len(g) == 0:
        return _splat(g, np.zeros((0, 3)), camera, background, stats)
    _, cam_pos = camera.world_to_camera()
    dirs = g.mu - cam_pos
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    colors = np.maximum(eval_sh(g.sh, dirs, sh_degree) + 0.5, 0.0)
    return _splat(g, colors, camera, background, stats)


def label_colors(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    colors = PALETTE[np.mod(labels, len(PALETTE))]
    colors[labels < 0] = NOISE_GRAY
    return colors


def render_segments(avatar: Avatar, labels, camera: Camera, background=(0.0, 0.0, 0.0),
                    stats: RenderStats | None = None) -> np.ndarray:
    """Render with every Gaussian painted in its label's palette colour (noise = gray)."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(avatar):
        raise ValueError(f"{len(labels)} labels for {len(avatar)} Gaussians")
    g = to_global_space(avatar).gaussians
    return _splat(g, label_colors(labels), camera, background, stats)


def orbit_camera(avatar: Avatar, azimuth: float = 30.0, elevation: float = 20.0, distance: float = 2.5,
                 fov_y: float = 40.0, width: int = 128, height: int = 128) -> Camera:
    """Camera looking at the avatar's centre from a sphere around it.

    ``distance`` is in multiples of the bounding radius.
    """
    mu = to_global_space(avatar).gaussians.mu
    if len(mu):
        centre = 0.5 * (mu.min(0) + mu.max(0))
        radius = max(float(np.linalg.norm(mu - centre, axis=1).max()), 1e-6)
    else:
        centre, radius = np.zeros(3), 1.0
    az, el = np.radians(azimuth), np.radians(elevation)
    offset = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return Camera(tuple(centre + distance * radius * offset), tuple(centre), (0.0, 0.0, 1.0), fov_y, width, height)


def save_image(path, image) -> None:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")
