"""Differentiable volumetric accumulation of color, depth, points and logits.

Per ray with samples t_k and intervals delta_k:

    T(k)  = exp(-sum_{l<k} sigma_l * delta_l)
    w_k   = T(k) * (1 - exp(-sigma_k * delta_k))
    C     = sum_k w_k c_k          (color)
    D     = sum_k w_k t_k          (expected termination distance)
    g     = origin + direction * D (accumulated 3D point)
    s_acc = sum_k w_k s_k          (segmentation logits, same weights)
    acc   = sum_k w_k

Segmentation logits are weight-averaged raw (not softmaxed) so the cosine
normalization applied later stays meaningful.  There is no background
composite term: acc < 1 leaves residual black.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import field as field_mod
from .rays import PatchRays, Ray, RaySamples, full_view_rays, stratified_samples
from .scene import CameraModel


@dataclass
class RenderedPatch:
    """Per-pixel render products for a rectangular grid of rays."""

    color: np.ndarray   # (H, W, 3)
    depth: np.ndarray   # (H, W)
    point: np.ndarray   # (H, W, 3)
    seg: np.ndarray     # (H, W, C_s)
    acc: np.ndarray     # (H, W)


def weights(sigma: np.ndarray, delta: np.ndarray):
    """Quadrature weights w_k and transmittances T(k) for (..., K) inputs."""
    sigma = np.asarray(sigma)
    delta = np.asarray(delta)
    if (sigma < 0).any():
        raise ValueError("negative density")
    if (delta <= 0).any():
        raise ValueError("non-positive delta")
    optical = sigma * delta
    accum = np.cumsum(optical, axis=-1)
    prev = np.concatenate([np.zeros_like(accum[..., :1]), accum[..., :-1]], axis=-1)
    T = np.exp(-prev)
    alpha = -np.expm1(-optical)
    return T * alpha, T


def render_rays(params, origins: np.ndarray, dirs: np.ndarray, samples: RaySamples,
                want_color: bool = True, want_seg: bool = True, keep_cache: bool = False):
    """Render a batch of rays; returns a dict of per-ray outputs.

    With keep_cache=True the returned dict carries the intermediates that
    render_backward needs.
    """
    dtype = params.dtype
    origins = np.asarray(origins, dtype=dtype).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=dtype).reshape(-1, 3)
    t = np.asarray(samples.t, dtype=dtype).reshape(origins.shape[0], -1)
    delta = np.asarray(samples.delta, dtype=dtype).reshape(t.shape)
    n_rays, K = t.shape

    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    dirs_flat = np.repeat(dirs, K, axis=0)
    out = field_mod.forward(params, pts.reshape(-1, 3), dirs_flat,
                            want_color=want_color, want_seg=want_seg,
                            keep_cache=keep_cache)
    sigma = out["sigma"].reshape(n_rays, K)
    w, T = weights(sigma, delta)

    depth = (w * t).sum(axis=-1)
    acc = w.sum(axis=-1)
    point = origins + depth[:, None] * dirs
    result = {"depth": depth, "acc": acc, "point": point, "w": w, "T": T,
              "color": None, "seg": None}
    if want_color:
        color = out["color"].reshape(n_rays, K, 3)
        result["color"] = (w[..., None] * color).sum(axis=1)
    if want_seg:
        seg = out["seg"].reshape(n_rays, K, -1)
        result["seg"] = (w[..., None] * seg).sum(axis=1)
    if keep_cache:
        result["cache"] = {
            "field": out["cache"], "sigma": sigma, "t": t, "delta": delta,
            "w": w, "T": T,
            "c_k": out["color"].reshape(n_rays, K, 3) if want_color else None,
            "s_k": out["seg"].reshape(n_rays, K, -1) if want_seg else None,
        }
    return result


def render_backward(params, cache, d_color=None, d_depth=None, d_seg=None,
                    d_acc=None, grad=None):
    """Gradient of the rendered outputs contracted with upstream gradients,
    wrt all field parameters.  Gradients flow through both the per-sample
    quantities (c_k, s_k) and the weights (via sigma)."""
    w = cache["w"]
    T = cache["T"]
    t = cache["t"]
    delta = cache["delta"]
    sigma = cache["sigma"]
    dtype = w.dtype

    dw = np.zeros_like(w)
    dc_k = None
    ds_k = None
    if d_color is not None:
        d_color = np.asarray(d_color, dtype=dtype)
        dw += (cache["c_k"] * d_color[:, None, :]).sum(axis=-1)
        dc_k = w[..., None] * d_color[:, None, :]
    if d_depth is not None:
        dw += np.asarray(d_depth, dtype=dtype)[:, None] * t
    if d_seg is not None:
        d_seg = np.asarray(d_seg, dtype=dtype)
        dw += (cache["s_k"] * d_seg[:, None, :]).sum(axis=-1)
        ds_k = w[..., None] * d_seg[:, None, :]
    if d_acc is not None:
        dw += np.asarray(d_acc, dtype=dtype)[:, None]

    # dL/dsigma_m = dw_m T_m delta_m exp(-sigma_m delta_m)
    #             - delta_m * sum_{k > m} dw_k w_k
    inner = dw * w
    tail = np.flip(np.cumsum(np.flip(inner, axis=-1), axis=-1), axis=-1) - inner
    d_sigma = dw * T * delta * np.exp(-sigma * delta) - delta * tail

    return field_mod.backward(
        params, cache["field"],
        d_color=None if dc_k is None else dc_k.reshape(-1, 3),
        d_sigma=d_sigma.reshape(-1),
        d_seg=None if ds_k is None else ds_k.reshape(-1, ds_k.shape[-1]),
        grad=grad,
    )


def render_ray(params, ray: Ray, samples: RaySamples):
    """Single-ray render: returns (C, D, g, s_acc, acc)."""
    res = render_rays(params, ray.origin[None, :], ray.direction[None, :],
                      RaySamples(t=samples.t[None, :], delta=samples.delta[None, :]))
    return (res["color"][0], float(res["depth"][0]), res["point"][0],
            res["seg"][0], float(res["acc"][0]))


def render_patch(params, patch: PatchRays, n_samples: int,
                 rng: np.random.Generator | None = None, jitter: bool = False) -> RenderedPatch:
    """Render a strided patch; per-pixel identical to rendering rays one by one."""
    P = patch.patch_size
    samples = stratified_samples(patch.near, patch.far, P * P, n_samples,
                                 rng=rng, jitter=jitter, dtype=np.float64)
    res = render_rays(params, patch.origins.reshape(-1, 3), patch.dirs.reshape(-1, 3), samples)
    return _to_patch(res, P, P)


def render_view(params, camera: CameraModel, pose: np.ndarray, n_samples: int,
                chunk_size: int = 4096) -> RenderedPatch:
    """Render every pixel of a view in ray chunks; chunking is invisible in
    the output (bit-identical for any chunk_size >= 1)."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    origins, dirs = full_view_rays(camera, pose)
    o_flat = origins.reshape(-1, 3)
    d_flat = dirs.reshape(-1, 3)
    n = o_flat.shape[0]
    parts = []
    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        samples = stratified_samples(camera.near, camera.far, stop - start, n_samples,
                                     jitter=False, dtype=np.float64)
        parts.append(render_rays(params, o_flat[start:stop], d_flat[start:stop], samples))
    res = {k: (np.concatenate([p[k] for p in parts]) if parts[0][k] is not None else None)
           for k in ("color", "depth", "point", "seg", "acc")}
    return _to_patch(res, camera.height, camera.width)


def _to_patch(res, h, w) -> RenderedPatch:
    cs = res["seg"].shape[-1]
    return RenderedPatch(
        color=res["color"].reshape(h, w, 3),
        depth=res["depth"].reshape(h, w),
        point=res["point"].reshape(h, w, 3),
        seg=res["seg"].reshape(h, w, cs),
        acc=res["acc"].reshape(h, w),
    )
