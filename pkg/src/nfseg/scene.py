"""Scene ingestion and storage.

A scene lives in one directory with a ``scene.json`` manifest:

    scene.json
    images/<view>.png      lossless 8-bit RGB
    masks/<view>.png       optional single-channel label images
    features/<view>.nsf    optional dense per-view feature tensors
    tokens/<view>.nst      optional per-grid-cell descriptor tokens

Mask label encoding: with ``mask_labels`` = m recorded in the manifest, label
i in 1..m is stored as pixel value floor(255*i/m) and 0 stays background, so
the single-foreground case uses the conventional 0/255 binary encoding.

The ``.nsf`` feature format is bit-exact: magic ``NSF1``, little-endian
uint32 H', W', C', then H'*W'*C' little-endian float32 in row-major
(h, w, c) order.  ``.nst`` token grids are the same layout under magic
``NST1``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

NSF_MAGIC = b"NSF1"
NST_MAGIC = b"NST1"

SCENE_FORMAT = "nfseg-scene"
SCENE_VERSION = 1

POSE_ORTHO_TOL = 1e-6


class SceneError(Exception):
    """Raised for malformed scene data (bad manifest, pose, file format...)."""


@dataclass
class CameraModel:
    """Shared pinhole intrinsics plus the near/far distance bounds of rays."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def validate(self):
        if not (self.fx > 0 and self.fy > 0):
            raise SceneError("camera focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise SceneError(f"camera bounds must satisfy 0 < near < far, got [{self.near}, {self.far}]")
        if self.width < 8 or self.height < 8:
            raise SceneError("camera resolution must be at least 8x8")

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                   width=int(d["width"]), height=int(d["height"]),
                   near=float(d["near"]), far=float(d["far"]))


@dataclass
class FeatureMap:
    """Dense per-view feature tensor of shape H' x W' x C'."""

    data: np.ndarray
    source_view_id: str = ""

    def validate(self):
        if self.data.ndim != 3:
            raise SceneError("feature map must be H' x W' x C'")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise SceneError("feature map spatial dims must be >= 1")
        if not np.isfinite(self.data).all():
            raise SceneError("feature map contains non-finite values")

    @property
    def channels(self):
        return self.data.shape[2]


@dataclass
class TokenGrid:
    """Per-grid-cell descriptor tokens (gh x gw x C), one cell per image region."""

    data: np.ndarray
    source_view_id: str = ""


@dataclass
class PosedView:
    """One calibrated view: image, camera-to-world pose, optional labels/features."""

    view_id: str
    image: np.ndarray            # H x W x 3 float32 in [0, 1]
    pose: np.ndarray             # 3 x 4 camera-to-world, float64
    mask: np.ndarray | None = None       # H x W integer labels, 0 = background
    features: FeatureMap | None = None
    tokens: TokenGrid | None = None

    def validate(self, camera: CameraModel | None = None):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise SceneError(f"view {self.view_id}: image must be HxWx3")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise SceneError(f"view {self.view_id}: image values outside [0, 1]")
        validate_pose(self.pose, self.view_id)
        if camera is not None and self.image.shape[:2] != (camera.height, camera.width):
            raise SceneError(f"view {self.view_id}: image size {self.image.shape[:2]} "
                             f"does not match camera {(camera.height, camera.width)}")
        if self.mask is not None and self.mask.shape != self.image.shape[:2]:
            raise SceneError(f"view {self.view_id}: mask size mismatch")
        if self.features is not None:
            self.features.validate()


@dataclass
class Scene:
    """All views of one capture, with a shared camera and train/test split."""

    camera: CameraModel
    views: list
    train_ids: list
    test_ids: list
    mask_labels: int = 1
    extras: dict = field(default_factory=dict)

    def validate(self):
        self.camera.validate()
        for v in self.views:
            v.validate(self.camera)
        ids = sorted(self.train_ids) + sorted(self.test_ids)
        if sorted(ids) != list(range(len(self.views))):
            raise SceneError("train/test split must be disjoint and cover all views")

    @property
    def train_views(self):
        return [self.views[i] for i in self.train_ids]

    @property
    def test_views(self):
        return [self.views[i] for i in self.test_ids]


def validate_pose(pose: np.ndarray, view_id: str = "?"):
    """Check that the 3x4 pose has an orthonormal, right-handed rotation part."""
    pose = np.asarray(pose)
    if pose.shape != (3, 4):
        raise SceneError(f"view {view_id}: pose must be 3x4, got {pose.shape}")
    rot = pose[:, :3]
    err = np.abs(rot.T @ rot - np.eye(3)).max()
    if err > POSE_ORTHO_TOL:
        raise SceneError(f"view {view_id}: pose not orthonormal (|R^T R - I| = {err:.2e})")
    if np.linalg.det(rot) < 0:
        raise SceneError(f"view {view_id}: pose rotation is left-handed")


# ---------------------------------------------------------------------------
# binary feature tensors
# ---------------------------------------------------------------------------

def write_feature_map(fm: FeatureMap, path) -> None:
    _write_tensor(path, NSF_MAGIC, fm.data)


def read_feature_map(path, source_view_id: str = "") -> FeatureMap:
    fm = FeatureMap(_read_tensor(path, NSF_MAGIC), source_view_id)
    fm.validate()
    return fm


def write_token_grid(tg: TokenGrid, path) -> None:
    _write_tensor(path, NST_MAGIC, tg.data)


def read_token_grid(path, source_view_id: str = "") -> TokenGrid:
    return TokenGrid(_read_tensor(path, NST_MAGIC), source_view_id)


def _write_tensor(path, magic: bytes, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim != 3:
        raise SceneError("tensor must be 3-D (h, w, c)")
    if not np.isfinite(data).all():
        raise SceneError("refusing to write non-finite tensor")
    h, w, c = data.shape
    payload = np.ascontiguousarray(data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(payload.tobytes())


def _read_tensor(path, magic: bytes) -> np.ndarray:
    with open(path, "rb") as fh:
        got = fh.read(4)
        if got != magic:
            raise SceneError(f"bad magic {got!r} in {path} (expected {magic!r})")
        hdr = fh.read(12)
        if len(hdr) != 12:
            raise SceneError(f"truncated header in {path}")
        h, w, c = struct.unpack("<III", hdr)
        raw = fh.read(4 * h * w * c)
        if len(raw) != 4 * h * w * c:
            raise SceneError(f"truncated payload in {path}")
        data = np.frombuffer(raw, dtype="<f4").reshape(h, w, c).copy()
    if not np.isfinite(data).all():
        raise SceneError(f"non-finite values in {path}")
    return data


# ---------------------------------------------------------------------------
# mask label <-> pixel value encoding
# ---------------------------------------------------------------------------

def mask_to_pixel_values(mask: np.ndarray, mask_labels: int) -> np.ndarray:
    vals = np.zeros(mask.shape, dtype=np.uint8)
    for i in range(1, mask_labels + 1):
        vals[mask == i] = (255 * i) // mask_labels
    return vals


def pixel_values_to_mask(vals: np.ndarray, mask_labels: int) -> np.ndarray:
    labels = np.rint(vals.astype(np.float64) * mask_labels / 255.0).astype(np.int32)
    return labels


# ---------------------------------------------------------------------------
# scene directory IO
# ---------------------------------------------------------------------------

def save_scene(scene: Scene, path) -> None:
    scene.validate()
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    view_entries = []
    for v in scene.views:
        img_rel = f"images/{v.view_id}.png"
        _save_image_u8(root / img_rel, np.rint(np.clip(v.image, 0.0, 1.0) * 255.0).astype(np.uint8))
        entry = {
            "id": v.view_id,
            "image": img_rel,
            "pose": [[float(x) for x in row] for row in v.pose],
            "mask": None,
            "features": None,
            "tokens": None,
        }
        if v.mask is not None:
            (root / "masks").mkdir(exist_ok=True)
            entry["mask"] = f"masks/{v.view_id}.png"
            _save_image_u8(root / entry["mask"], mask_to_pixel_values(v.mask, scene.mask_labels))
        if v.features is not None:
            (root / "features").mkdir(exist_ok=True)
            entry["features"] = f"features/{v.view_id}.nsf"
            write_feature_map(v.features, root / entry["features"])
        if v.tokens is not None:
            (root / "tokens").mkdir(exist_ok=True)
            entry["tokens"] = f"tokens/{v.view_id}.nst"
            write_token_grid(v.tokens, root / entry["tokens"])
        view_entries.append(entry)
    manifest = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "camera": scene.camera.to_dict(),
        "mask_labels": scene.mask_labels,
        "views": view_entries,
        "split": {"train": list(scene.train_ids), "test": list(scene.test_ids)},
        "extras": scene.extras,
    }
    (root / "scene.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_scene(path) -> Scene:
    root = Path(path)
    manifest_path = root / "scene.json"
    if not manifest_path.exists():
        raise SceneError(f"no scene.json in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise SceneError(f"malformed scene.json: {e}") from e
    if manifest.get("format") != SCENE_FORMAT:
        raise SceneError(f"not a {SCENE_FORMAT} manifest")
    camera = CameraModel.from_dict(manifest["camera"])
    mask_labels = int(manifest.get("mask_labels", 1))
    views = []
    for entry in manifest["views"]:
        vid = entry["id"]
        image = _load_image_u8(root / entry["image"]).astype(np.float32) / 255.0
        if image.ndim == 2:
            image = np.repeat(image[:, :, None], 3, axis=2)
        pose = np.asarray(entry["pose"], dtype=np.float64)
        mask = None
        if entry.get("mask"):
            vals = _load_image_u8(root / entry["mask"])
            if vals.ndim != 2:
                raise SceneError(f"view {vid}: mask must be single-channel")
            if vals.shape != image.shape[:2]:
                raise SceneError(f"view {vid}: mask size {vals.shape} != image size {image.shape[:2]}")
            mask = pixel_values_to_mask(vals, mask_labels)
        features = read_feature_map(root / entry["features"], vid) if entry.get("features") else None
        tokens = read_token_grid(root / entry["tokens"], vid) if entry.get("tokens") else None
        views.append(PosedView(vid, image, pose, mask, features, tokens))
    scene = Scene(
        camera=camera,
        views=views,
        train_ids=[int(i) for i in manifest["split"]["train"]],
        test_ids=[int(i) for i in manifest["split"]["test"]],
        mask_labels=mask_labels,
        extras=manifest.get("extras", {}),
    )
    scene.validate()
    return scene


def _save_image_u8(path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path, format="PNG")


def _load_image_u8(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise SceneError(f"missing file {p}")
    with Image.open(p) as im:
        return np.asarray(im)


# ---------------------------------------------------------------------------
# feature sampling
# ---------------------------------------------------------------------------

def sample_feature_at(fm: FeatureMap, pixel, image_size) -> np.ndarray:
    """Bilinearly sample a feature vector at one image pixel (x, y)."""
    x, y = pixel
    w, h = image_size
    if not (0 <= x < w and 0 <= y < h):
        raise SceneError(f"pixel {pixel} outside image bounds {image_size}")
    out = sample_features_at(fm, np.asarray([x], dtype=np.float64), np.asarray([y], dtype=np.float64), image_size)
    return out[0]


def sample_features_at(fm: FeatureMap, px: np.ndarray, py: np.ndarray, image_size) -> np.ndarray:
    """Vectorized bilinear feature lookup at image pixel coordinates.

    Image pixel (x, y) maps to feature-grid coordinates (x*W'/W, y*H'/H)
    with edge clamping, so a full-resolution feature map is sampled at the
    identical integer sites.
    """
    w, h = image_size
    data = fm.data
    fh, fw = data.shape[0], data.shape[1]
    gx = np.asarray(px, dtype=np.float64) * (fw / w)
    gy = np.asarray(py, dtype=np.float64) * (fh / h)
    gx = np.clip(gx, 0.0, fw - 1.0)
    gy = np.clip(gy, 0.0, fh - 1.0)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x1 = np.minimum(x0 + 1, fw - 1)
    y1 = np.minimum(y0 + 1, fh - 1)
    tx = (gx - x0)[..., None]
    ty = (gy - y0)[..., None]
    v00 = data[y0, x0]
    v01 = data[y0, x1]
    v10 = data[y1, x0]
    v11 = data[y1, x1]
    top = v00 * (1.0 - tx) + v01 * tx
    bot = v10 * (1.0 - tx) + v11 * tx
    return top * (1.0 - ty) + bot * ty
