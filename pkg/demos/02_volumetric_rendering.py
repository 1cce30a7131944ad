"""Volumetric rendering mechanics: quadrature weights, single rays, patches.

Walks the rendering equation bottom-up on a freshly initialized field: the
transmittance/weight profile along one ray, the five per-ray outputs, and a
strided patch covering a wide receptive field at fixed cost.
"""

import numpy as np

from nfseg.field import FieldParams, FieldConfig
from nfseg.rays import pixel_to_ray, ray_samples_for, sample_strided_patch
from nfseg.render import render_patch, render_ray, weights
from nfseg.synthetic import camera_for, default_spec, ring_poses

spec = default_spec()
camera = camera_for(spec)
pose = ring_poses(spec)[0]
params = FieldParams.init(FieldConfig(trunk_width=64, seg_hidden=64), seed=1)

# -- the quadrature weights themselves --------------------------------------
sigma = np.array([[0.0, 0.5, 3.0, 8.0, 0.1]])
delta = np.full((1, 5), 0.3)
w, T = weights(sigma, delta)
print("density :", sigma[0])
print("weight  :", np.round(w[0], 4))
print("transmit:", np.round(T[0], 4))
print(f"sum(w) = {w.sum():.4f} = 1 - T(K+1) = {1 - np.exp(-(sigma*delta).sum()):.4f}")

# -- one ray through the fresh field -----------------------------------------
ray = pixel_to_ray(camera, pose, (camera.width // 2, camera.height // 2))
samples = ray_samples_for(ray, K=32)
color, depth, point, seg, acc = render_ray(params, ray, samples)
print(f"\ncenter-pixel ray: color {np.round(color, 3)}, depth {depth:.2f}, "
      f"acc {acc:.2f}")
print(f"accumulated 3D point {np.round(point, 2)} = origin + depth * direction")
print(f"seg logits {np.round(seg, 4)} (weight-averaged, raw)")

# -- a strided patch: P x P rays spanning (P*stride)^2 pixels ----------------
rng = np.random.default_rng(0)
patch = sample_strided_patch(camera, pose, patch_size=16, stride=2, rng=rng)
rendered = render_patch(params, patch, n_samples=32)
print(f"\npatch at {patch.patch_origin}, stride {patch.stride}: "
      f"covers {16 * 2}x{16 * 2} pixels with {16 * 16} rays")
print(f"patch depth range [{rendered.depth.min():.2f}, {rendered.depth.max():.2f}], "
      f"acc mean {rendered.acc.mean():.2f}")
