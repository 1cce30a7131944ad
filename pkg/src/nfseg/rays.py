"""Camera rays, strided ray patches, and stratified depth samples.

Camera convention: pinhole, camera looks down -z, pixel x grows right and
pixel y grows down, so pixel (x, y) maps to the camera-space direction
((x - cx)/fx, -(y - cy)/fy, -1) before rotation into world space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import CameraModel


@dataclass
class Ray:
    origin: np.ndarray       # (3,)
    direction: np.ndarray    # (3,), unit norm
    near: float
    far: float

    @property
    def view_dir(self):
        # The angular viewing direction; identical to the (unit) ray direction.
        return self.direction


@dataclass
class PatchRays:
    """A P x P grid of rays sampled at pixel interval ``stride``."""

    origins: np.ndarray       # (P, P, 3)
    dirs: np.ndarray          # (P, P, 3)
    pixel_coords: np.ndarray  # (P, P, 2) integer (x, y)
    view_id: str
    patch_origin: tuple       # (x0, y0)
    stride: int
    near: float
    far: float

    @property
    def patch_size(self):
        return self.dirs.shape[0]


@dataclass
class RaySamples:
    t: np.ndarray       # (..., K), strictly increasing in [near, far]
    delta: np.ndarray   # (..., K), delta[i] = t[i+1] - t[i]; terminal bin width


def ray_dirs_for_pixels(camera: CameraModel, pose: np.ndarray, px, py):
    """World-space origins and unit directions for pixel coordinates."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    dir_cam = np.stack(
        [(px - camera.cx) / camera.fx,
         -(py - camera.cy) / camera.fy,
         -np.ones_like(px)],
        axis=-1,
    )
    rot = np.asarray(pose)[:, :3]
    trans = np.asarray(pose)[:, 3]
    dirs = dir_cam @ rot.T
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(trans, dirs.shape).copy()
    return origins, dirs


def pixel_to_ray(camera: CameraModel, pose: np.ndarray, pixel) -> Ray:
    x, y = pixel
    if not (0 <= x < camera.width and 0 <= y < camera.height):
        raise ValueError(f"pixel {pixel} outside image bounds")
    origins, dirs = ray_dirs_for_pixels(camera, pose, np.float64(x), np.float64(y))
    return Ray(origin=origins, direction=dirs, near=camera.near, far=camera.far)


def full_view_rays(camera: CameraModel, pose: np.ndarray):
    """Origins and directions for every pixel of a view, shape (H, W, 3)."""
    ys, xs = np.mgrid[0:camera.height, 0:camera.width]
    return ray_dirs_for_pixels(camera, pose, xs, ys)


def patch_placement_count(camera: CameraModel, patch_size: int, stride: int) -> int:
    span = patch_size * stride
    nx = camera.width - span + 1
    ny = camera.height - span + 1
    if nx < 1 or ny < 1:
        return 0
    return nx * ny


def sample_strided_patch(camera: CameraModel, pose: np.ndarray, patch_size: int,
                         stride: int, rng: np.random.Generator, view_id: str = "") -> PatchRays:
    """Sample a P x P ray grid whose receptive field spans (P*stride)^2 pixels.

    The patch origin is uniform over all valid placements.
    """
    span = patch_size * stride
    if span > min(camera.width, camera.height):
        raise ValueError(f"patch span {span} exceeds image {camera.width}x{camera.height}")
    x0 = int(rng.integers(0, camera.width - span + 1))
    y0 = int(rng.integers(0, camera.height - span + 1))
    return patch_rays_at(camera, pose, (x0, y0), patch_size, stride, view_id)


def patch_rays_at(camera: CameraModel, pose: np.ndarray, patch_origin, patch_size: int,
                  stride: int, view_id: str = "") -> PatchRays:
    x0, y0 = patch_origin
    xs = x0 + stride * np.arange(patch_size)
    ys = y0 + stride * np.arange(patch_size)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    if gx.max() >= camera.width or gy.max() >= camera.height:
        raise ValueError("patch extends outside the image")
    origins, dirs = ray_dirs_for_pixels(camera, pose, gx, gy)
    coords = np.stack([gx, gy], axis=-1)
    return PatchRays(origins=origins, dirs=dirs, pixel_coords=coords, view_id=view_id,
                     patch_origin=(int(x0), int(y0)), stride=int(stride),
                     near=camera.near, far=camera.far)


def stratified_samples(near: float, far: float, n_rays: int, K: int,
                       rng: np.random.Generator | None = None, jitter: bool = False,
                       dtype=np.float64) -> RaySamples:
    """Stratified depth samples: K even bins over [near, far], one point each.

    jitter=True draws uniformly inside each bin, jitter=False takes bin
    midpoints.  The terminal delta is the uniform bin width (far - near)/K.
    """
    if K < 2:
        raise ValueError("need at least 2 samples per ray")
    bin_w = (far - near) / K
    edges = near + bin_w * np.arange(K, dtype=np.float64)
    if jitter:
        if rng is None:
            raise ValueError("jitter requires an rng")
        u = rng.random((n_rays, K))
    else:
        u = np.full((n_rays, K), 0.5)
    t = edges[None, :] + u * bin_w
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = bin_w
    return RaySamples(t=t.astype(dtype), delta=delta.astype(dtype))


def ray_samples_for(ray: Ray, K: int, rng: np.random.Generator | None = None,
                    jitter: bool = False) -> RaySamples:
    s = stratified_samples(ray.near, ray.far, 1, K, rng=rng, jitter=jitter)
    return RaySamples(t=s.t[0], delta=s.delta[0])
