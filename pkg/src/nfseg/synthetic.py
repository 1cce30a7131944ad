"""Procedural multi-view scenes: lambertian primitives over a ground plane.

Every view is analytically ray-traced at pixel centers with the same pinhole
model used for training rays, so a ray cast for pixel p intersects the scene
exactly where the stored color says it should.  Ground-truth masks label each
pixel with the index of the primitive its primary ray hits first (0 for the
background plane).  Synthetic feature maps encode the per-pixel feature label
as a one-hot vector, optionally perturbed by gaussian noise and re-normalized,
which gives the appearance loss a controllable ground-truth-correlated signal
without a pretrained backbone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .rays import full_view_rays
from .scene import CameraModel, FeatureMap, PosedView, Scene, SceneError


@dataclass
class Primitive:
    """A lambertian sphere or axis-aligned box with a flat albedo."""

    kind: str                   # "sphere" | "box"
    center: tuple
    size: float | tuple         # sphere radius, or box half-extents
    albedo: tuple
    feature_label: int | None = None   # defaults to the primitive's mask label


@dataclass
class SyntheticSpec:
    width: int = 64
    height: int = 64
    n_views: int = 24
    n_test: int = 4
    ring_radius: float = 2.0
    ring_height: float = 2.0
    target: tuple = (0.0, 0.0, 0.35)
    fov_deg: float = 40.0
    near: float = 1.0
    far: float = 7.5
    plane_z: float = 0.0
    plane_normal: tuple = (0.0, 0.0, 1.0)   # plane through (0, 0, plane_z)
    plane_albedo: tuple = (0.42, 0.44, 0.48)
    primitives: list = field(default_factory=lambda: [
        Primitive("sphere", (0.0, 0.0, 0.7), 0.42, (0.85, 0.16, 0.12)),
    ])
    light_dir: tuple = (0.35, -0.2, 0.91)   # direction toward the light
    ambient: float = 0.35
    sigma_f: float = 0.0
    feature_downscale: int = 1

    def to_jsonable(self):
        d = asdict(self)
        return d


def default_spec(**overrides) -> SyntheticSpec:
    return SyntheticSpec(**overrides)


def two_object_spec(**overrides) -> SyntheticSpec:
    """Two spheres with identical albedo and identical feature labels.

    Appearance cues cannot tell the objects apart; only their 3D locations
    differ, which is the regime the geometry loss is meant to resolve.  The
    spheres are separated along every coordinate axis and the ground plane
    is tilted: the geometry volume sums inverse per-coordinate gaps, so an
    aligned coordinate (two points at the same height, or the whole z=const
    plane) would make distant point pairs look near-coincident.
    """
    prims = [
        Primitive("sphere", (-0.55, -0.40, 0.52), 0.33, (0.82, 0.18, 0.14), feature_label=1),
        Primitive("sphere", (0.55, 0.42, 1.10), 0.28, (0.82, 0.18, 0.14), feature_label=1),
    ]
    overrides.setdefault("far", 10.0)
    spec = SyntheticSpec(primitives=prims, plane_normal=(0.12, -0.09, 1.0), **overrides)
    return spec


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world 3x4 for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nrm = np.linalg.norm(right)
    if nrm < 1e-9:
        raise SceneError("camera forward direction parallel to up vector")
    right = right / nrm
    upv = np.cross(right, fwd)
    pose = np.empty((3, 4), dtype=np.float64)
    pose[:, 0] = right
    pose[:, 1] = upv
    pose[:, 2] = -fwd
    pose[:, 3] = eye
    return pose


def ring_poses(spec: SyntheticSpec):
    poses = []
    for i in range(spec.n_views):
        phi = 2.0 * np.pi * i / spec.n_views
        eye = (spec.ring_radius * np.cos(phi), spec.ring_radius * np.sin(phi), spec.ring_height)
        poses.append(look_at_pose(eye, spec.target))
    return poses


def camera_for(spec: SyntheticSpec) -> CameraModel:
    f = 0.5 * spec.width / np.tan(0.5 * np.deg2rad(spec.fov_deg))
    return CameraModel(fx=f, fy=f, cx=(spec.width - 1) / 2.0, cy=(spec.height - 1) / 2.0,
                       width=spec.width, height=spec.height, near=spec.near, far=spec.far)


# ---------------------------------------------------------------------------
# analytic intersection and shading, vectorized over rays
# ---------------------------------------------------------------------------

def _intersect_sphere(o, d, center, radius):
    oc = o - np.asarray(center)
    b = np.sum(oc * d, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc >= 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-9, t0, t1)
    t = np.where(hit & (t > 1e-9), t, np.inf)
    return t


def _intersect_box(o, d, center, half):
    center = np.asarray(center)
    half = np.asarray(half)
    inv = 1.0 / np.where(np.abs(d) < 1e-12, 1e-12 * np.sign(d + 1e-30), d)
    t_lo = (center - half - o) * inv
    t_hi = (center + half - o) * inv
    t_near = np.minimum(t_lo, t_hi).max(axis=-1)
    t_far = np.maximum(t_lo, t_hi).min(axis=-1)
    hit = (t_far >= t_near) & (t_far > 1e-9)
    t = np.where(t_near > 1e-9, t_near, t_far)
    return np.where(hit, t, np.inf)


def _intersect_plane(o, d, plane_z, normal):
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    p0 = np.array([0.0, 0.0, plane_z])
    dn = d @ n
    t = ((p0 - o) @ n) / np.where(np.abs(dn) < 1e-12, 1e-12, dn)
    return np.where(t > 1e-9, t, np.inf)


def _primitive_normal(prim: Primitive, p):
    if prim.kind == "sphere":
        n = p - np.asarray(prim.center)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)
    half = np.asarray(prim.size, dtype=np.float64)
    rel = (p - np.asarray(prim.center)) / half
    axis = np.argmax(np.abs(rel), axis=-1)
    n = np.zeros_like(p)
    idx = np.arange(p.shape[0])
    n[idx, axis] = np.sign(rel[idx, axis])
    return n


def trace_rays(spec: SyntheticSpec, origins: np.ndarray, dirs: np.ndarray):
    """First-hit trace: returns (colors (N,3), labels (N,), t (N,)).

    Label 0 is the background plane; primitive i gets label i+1.  Rays that
    hit nothing get color (0,0,0), label 0, t = inf.
    """
    o = origins.reshape(-1, 3).astype(np.float64)
    d = dirs.reshape(-1, 3).astype(np.float64)
    n_rays = o.shape[0]
    best_t = _intersect_plane(o, d, spec.plane_z, spec.plane_normal)
    best_label = np.zeros(n_rays, dtype=np.int32)
    for i, prim in enumerate(spec.primitives):
        if prim.kind == "sphere":
            t = _intersect_sphere(o, d, prim.center, float(prim.size))
        elif prim.kind == "box":
            t = _intersect_box(o, d, prim.center, prim.size)
        else:
            raise SceneError(f"unknown primitive kind {prim.kind!r}")
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_label = np.where(closer, i + 1, best_label)

    light = np.asarray(spec.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    colors = np.zeros((n_rays, 3), dtype=np.float64)
    hit = np.isfinite(best_t)
    p = o + best_t[:, None] * d
    for label in np.unique(best_label[hit]):
        sel = hit & (best_label == label)
        if label == 0:
            albedo = np.asarray(spec.plane_albedo)
            pn = np.asarray(spec.plane_normal, dtype=np.float64)
            pn = pn / np.linalg.norm(pn)
            n = np.tile(pn, (int(sel.sum()), 1))
        else:
            prim = spec.primitives[label - 1]
            albedo = np.asarray(prim.albedo)
            n = _primitive_normal(prim, p[sel])
        lambert = np.clip(n @ light, 0.0, 1.0)
        shade = np.clip(spec.ambient + (1.0 - spec.ambient) * lambert, 0.0, 1.0)
        colors[sel] = shade[:, None] * albedo[None, :]
    return colors, best_label, best_t


def _feature_label_map(spec: SyntheticSpec):
    labels = [0]
    for i, prim in enumerate(spec.primitives):
        labels.append(prim.feature_label if prim.feature_label is not None else i + 1)
    return np.asarray(labels, dtype=np.int64)


def make_synthetic_scene(spec: SyntheticSpec, seed: int) -> Scene:
    """Deterministically generate a scene: images, masks, feature maps, split."""
    if spec.n_views < 2:
        raise SceneError("need at least 2 views")
    if not (1 <= spec.n_test < spec.n_views):
        raise SceneError("test split must keep at least one training view")
    camera = camera_for(spec)
    camera.validate()
    poses = ring_poses(spec)
    for prim in spec.primitives:
        radius = float(prim.size) if prim.kind == "sphere" else float(np.linalg.norm(prim.size))
        for pose in poses:
            dist = np.linalg.norm(np.asarray(prim.center) - pose[:, 3])
            if dist - radius < spec.near or dist + radius > spec.far:
                raise SceneError(f"primitive at {prim.center} outside [near, far] bounds")

    fl_map = _feature_label_map(spec)
    n_feature_labels = int(fl_map.max()) + 1
    rng = np.random.default_rng(seed)
    ds = spec.feature_downscale

    views = []
    for i, pose in enumerate(poses):
        origins, dirs = full_view_rays(camera, pose)
        colors, labels, tvals = trace_rays(spec, origins, dirs)
        finite = np.isfinite(tvals)
        if finite.any():
            tmin, tmax = tvals[finite].min(), tvals[finite].max()
            if tmin < spec.near or tmax > spec.far:
                raise SceneError(
                    f"view {i}: hits at distances [{tmin:.3f}, {tmax:.3f}] escape "
                    f"the [{spec.near}, {spec.far}] bounds; adjust the spec")
        image = colors.reshape(spec.height, spec.width, 3)
        # quantize to the stored 8-bit grid so save -> load is lossless
        image = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.float32) / 255.0
        mask = labels.reshape(spec.height, spec.width)

        flab = fl_map[mask]
        if ds > 1:
            flab = flab[ds // 2::ds, ds // 2::ds]
        onehot = np.eye(n_feature_labels, dtype=np.float64)[flab]
        if spec.sigma_f > 0.0:
            onehot = onehot + spec.sigma_f * rng.standard_normal(onehot.shape)
        norms = np.linalg.norm(onehot, axis=-1, keepdims=True)
        onehot = onehot / np.maximum(norms, 1e-12)
        view_id = f"view_{i:03d}"
        fm = FeatureMap(onehot.astype(np.float32), view_id)
        views.append(PosedView(view_id, image, pose, mask.astype(np.int32), fm))

    step = spec.n_views / spec.n_test
    test_ids = sorted({int(np.floor(step / 2 + j * step)) for j in range(spec.n_test)})
    train_ids = [i for i in range(spec.n_views) if i not in test_ids]
    scene = Scene(camera=camera, views=views, train_ids=train_ids, test_ids=test_ids,
                  mask_labels=len(spec.primitives),
                  extras={"synthetic": spec.to_jsonable(), "seed": int(seed)})
    scene.validate()
    return scene
