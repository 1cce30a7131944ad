"""Cross-view correspondence volumes and patch-pair discovery.

A correspondence volume relates every spatial location (h, w) of one patch
to every location (h', w') of another:

  appearance / segmentation:  V[h,w,h',w'] = <a_hw/|a_hw|, b_h'w'/|b_h'w'|>
  geometry:                   V[h,w,h',w'] = sum_c 1 / (|g_chw - g'_ch'w'| + eps)

Patch pairs are discovered from an N x N cosine-similarity matrix of patch
descriptors: positives are the diagonal (each patch with itself), negatives
pair each patch with its lowest-similarity row entry (ties broken toward the
smallest index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_EPS_NORM = 1e-8
DEFAULT_EPS_GEO = 1e-2


@dataclass
class CorrVolume:
    """4-index similarity tensor between two P x P patches."""

    data: np.ndarray          # (P, P, P, P) indexed (h, w, h', w')
    kind: str                 # "appearance" | "segmentation" | "geometry"
    inputs: tuple | None = None   # raw (a, b, eps_norm) kept for backprop

    @property
    def patch_size(self):
        return self.data.shape[0]


@dataclass
class PairSet:
    """N positive and N negative patch pairs for one training batch."""

    positives: list              # [(i, i)]
    negatives: list              # [(i, argmin_j M_ij)]
    similarity: np.ndarray       # (N, N) descriptor cosine matrix
    low_contrast: bool = False   # all descriptors (nearly) identical


def _normalize_rows(flat: np.ndarray, eps_norm: float):
    norms = np.linalg.norm(flat, axis=-1, keepdims=True)
    return flat / (norms + eps_norm), norms


def cosine_volume(a: np.ndarray, b: np.ndarray, eps_norm: float = DEFAULT_EPS_NORM,
                  kind: str = "appearance") -> CorrVolume:
    """Volume of cosines between per-location L2-normalized vectors."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError("channel counts differ")
    pa = a.shape[:2]
    pb = b.shape[:2]
    ua, _ = _normalize_rows(a.reshape(-1, a.shape[-1]), eps_norm)
    ub, _ = _normalize_rows(b.reshape(-1, b.shape[-1]), eps_norm)
    data = (ua @ ub.T).reshape(pa + pb)
    return CorrVolume(data=data, kind=kind, inputs=(a, b, eps_norm))


def cosine_volume_backward(vol: CorrVolume, d_vol: np.ndarray):
    """Gradients of sum(d_vol * vol.data) wrt the volume's raw inputs."""
    a, b, eps_norm = vol.inputs
    c = a.shape[-1]
    af = a.reshape(-1, c)
    bf = b.reshape(-1, c)
    ua, na = _normalize_rows(af, eps_norm)
    ub, nb = _normalize_rows(bf, eps_norm)
    m = np.asarray(d_vol, dtype=vol.data.dtype).reshape(af.shape[0], bf.shape[0])
    dua = m @ ub
    dub = m.T @ ua

    def through_norm(x, n, du):
        denom = n + eps_norm
        da = du / denom
        safe_n = np.where(n > 0.0, n, 1.0)
        coef = (x * du).sum(axis=-1, keepdims=True) / (safe_n * denom * denom)
        return da - np.where(n > 0.0, coef * x, 0.0)

    da = through_norm(af, na, dua).reshape(a.shape)
    db = through_norm(bf, nb, dub).reshape(b.shape)
    return da, db


def geometry_volume(g: np.ndarray, g_other: np.ndarray,
                    eps: float = DEFAULT_EPS_GEO) -> CorrVolume:
    """Inverse per-coordinate absolute gaps between accumulated 3D points."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    g = np.asarray(g)
    g_other = np.asarray(g_other)
    pa = g.shape[:2]
    pb = g_other.shape[:2]
    gf = g.reshape(-1, 3)
    of = g_other.reshape(-1, 3)
    gaps = np.abs(gf[:, None, :] - of[None, :, :])
    data = (1.0 / (gaps + eps)).sum(axis=-1).reshape(pa + pb)
    return CorrVolume(data=data, kind="geometry")


def patch_descriptor(features: np.ndarray) -> np.ndarray:
    """L2-normalized spatial mean of the patch's per-location features."""
    feats = np.asarray(features, dtype=np.float64)
    mean = feats.reshape(-1, feats.shape[-1]).mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise ValueError("all-zero patch features have no descriptor")
    return mean / norm


def descriptor_for_patch(view, pixel_coords: np.ndarray, patch_feats: np.ndarray) -> np.ndarray:
    """Patch descriptor: the view's precomputed token when the scene ships a
    token grid, otherwise pooled patch features."""
    tokens = getattr(view, "tokens", None)
    if tokens is not None:
        gh, gw, _ = tokens.data.shape
        h_img, w_img = view.image.shape[:2]
        cx = pixel_coords[..., 0].mean()
        cy = pixel_coords[..., 1].mean()
        gx = min(int(cx * gw / w_img), gw - 1)
        gy = min(int(cy * gh / h_img), gh - 1)
        tok = tokens.data[gy, gx].astype(np.float64)
        norm = np.linalg.norm(tok)
        if norm > 1e-12:
            return tok / norm
    return patch_descriptor(patch_feats)


def select_pairs(descriptors: np.ndarray) -> PairSet:
    """Positives are identity pairs; each row's negative is its similarity
    argmin (excluding the diagonal), ties broken by smallest index."""
    d = np.asarray(descriptors, dtype=np.float64)
    n = d.shape[0]
    if n < 2:
        raise ValueError("need at least 2 patches to build pairs")
    sim = d @ d.T
    masked = sim.copy()
    np.fill_diagonal(masked, np.inf)
    neg_j = np.argmin(masked, axis=1)   # first minimum = smallest index on ties
    off_diag = masked[np.isfinite(masked)]
    low_contrast = bool(off_diag.max() - off_diag.min() < 1e-6)
    return PairSet(
        positives=[(i, i) for i in range(n)],
        negatives=[(i, int(neg_j[i])) for i in range(n)],
        similarity=sim,
        low_contrast=low_contrast,
    )
