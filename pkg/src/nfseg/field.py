"""The trainable scene function F: (x, theta) -> (color, density, seg logits).

Frequency-encoded position feeds a ReLU trunk; the density head (softplus)
and the 4-layer segmentation head (raw logits) read the trunk feature, and
the color head (sigmoid) reads the trunk feature concatenated with the
encoded view direction, so segmentation logits are exactly independent of
the viewing direction.

Parameters live in one flat vector with named views; the segmentation head
occupies the trailing contiguous slice so stage-2 training can freeze
everything else bitwise.  All gradients are hand-written analytic
reverse-mode passes and are validated against central finite differences in
the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import load_container, save_container


class DivergenceError(RuntimeError):
    """Non-finite values encountered in the field; training has diverged."""


# Row-pad matmuls to a multiple of this so BLAS picks the same kernel for any
# batch size; without it, chunked and per-pixel rendering differ in the last
# ulp (the 1-row GEMM takes a different accumulation path).
_ROW_PAD = 8


def stable_matmul(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    m = a.shape[0]
    rem = m % _ROW_PAD
    if rem == 0 and m > 0:
        return a @ w
    padded = np.zeros((m + (_ROW_PAD - rem), a.shape[1]), dtype=a.dtype)
    padded[:m] = a
    return (padded @ w)[:m]


def relu(z):
    return np.maximum(z, 0.0)


def sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def softplus(z):
    return np.logaddexp(z.dtype.type(0), z)


@dataclass
class FieldConfig:
    l_pos: int = 10
    l_dir: int = 4
    trunk_depth: int = 4
    trunk_width: int = 128
    color_hidden: int = 64
    seg_depth: int = 4
    seg_hidden: int = 256
    seg_out: int = 2
    density_bias: float = -2.0

    @property
    def pos_dim(self):
        return 3 + 6 * self.l_pos

    @property
    def dir_dim(self):
        return 3 + 6 * self.l_dir

    def to_dict(self):
        return {
            "l_pos": self.l_pos, "l_dir": self.l_dir,
            "trunk_depth": self.trunk_depth, "trunk_width": self.trunk_width,
            "color_hidden": self.color_hidden,
            "seg_depth": self.seg_depth, "seg_hidden": self.seg_hidden,
            "seg_out": self.seg_out, "density_bias": self.density_bias,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (int(v) if k != "density_bias" else float(v)) for k, v in d.items()})


def tiny_config(width: int = 16, depth: int = 2) -> FieldConfig:
    """A field small enough for exhaustive finite-difference checking."""
    return FieldConfig(l_pos=2, l_dir=1, trunk_depth=depth, trunk_width=width,
                       color_hidden=width, seg_depth=4, seg_hidden=width, seg_out=2)


def _layer_specs(cfg: FieldConfig):
    """Parameter layout: (name, shape) in flat-vector order, seg head last."""
    specs = [("trunk.0.w", (cfg.pos_dim, cfg.trunk_width)), ("trunk.0.b", (cfg.trunk_width,))]
    for i in range(1, cfg.trunk_depth):
        specs.append((f"trunk.{i}.w", (cfg.trunk_width, cfg.trunk_width)))
        specs.append((f"trunk.{i}.b", (cfg.trunk_width,)))
    specs.append(("sigma.w", (cfg.trunk_width, 1)))
    specs.append(("sigma.b", (1,)))
    specs.append(("color.0.w", (cfg.trunk_width + cfg.dir_dim, cfg.color_hidden)))
    specs.append(("color.0.b", (cfg.color_hidden,)))
    specs.append(("color.1.w", (cfg.color_hidden, 3)))
    specs.append(("color.1.b", (3,)))
    dims = [cfg.trunk_width] + [cfg.seg_hidden] * (cfg.seg_depth - 1) + [cfg.seg_out]
    for i in range(cfg.seg_depth):
        specs.append((f"seg.{i}.w", (dims[i], dims[i + 1])))
        specs.append((f"seg.{i}.b", (dims[i + 1],)))
    return specs


class FieldParams:
    """All trainable weights in one flat vector with named array views."""

    def __init__(self, config: FieldConfig, flat: np.ndarray):
        self.config = config
        self.flat = flat
        self._views = {}
        offset = 0
        seg_start = None
        for name, shape in _layer_specs(config):
            size = int(np.prod(shape))
            if name.startswith("seg.") and seg_start is None:
                seg_start = offset
            self._views[name] = flat[offset:offset + size].reshape(shape)
            offset += size
        if offset != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, layout needs {offset}")
        self.seg_slice = slice(seg_start, offset)

    def __getitem__(self, name):
        return self._views[name]

    def __setitem__(self, name, value):
        if value is not self._views[name]:
            self._views[name][...] = value

    @property
    def n_params(self):
        return self.flat.size

    @property
    def dtype(self):
        return self.flat.dtype

    @classmethod
    def init(cls, config: FieldConfig, seed: int, dtype=np.float32) -> "FieldParams":
        """Uniform fan-in scaled init; density bias set for non-degenerate
        initial transmittance."""
        specs = _layer_specs(config)
        total = sum(int(np.prod(s)) for _, s in specs)
        flat = np.zeros(total, dtype=dtype)
        params = cls(config, flat)
        rng = np.random.default_rng(seed)
        for name, shape in specs:
            if name.endswith(".w"):
                bound = 1.0 / np.sqrt(shape[0])
                params[name][...] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params["sigma.b"][...] = config.density_bias
        return params

    def copy(self) -> "FieldParams":
        return FieldParams(self.config, self.flat.copy())

    def astype(self, dtype) -> "FieldParams":
        return FieldParams(self.config, self.flat.astype(dtype))

    def zero_grad(self) -> np.ndarray:
        """A gradient buffer with the same layout as the flat vector."""
        return np.zeros_like(self.flat)

    # -- snapshot file: config echo + float32 params + iteration -----------
    def save(self, path, iteration: int = 0) -> None:
        save_container(path, "field-snapshot",
                       {"config": self.config.to_dict(), "iteration": int(iteration)},
                       {"params": self.flat.astype(np.float32)})

    @classmethod
    def load(cls, path):
        _, meta, arrays = load_container(path, expect_kind="field-snapshot")
        config = FieldConfig.from_dict(meta["config"])
        params = cls(config, arrays["params"].astype(np.float32))
        return params, int(meta["iteration"])


def encode(x: np.ndarray, L: int) -> np.ndarray:
    """Frequency encoding: concat of x and (sin(2^l pi x), cos(2^l pi x))."""
    x = np.asarray(x)
    if L == 0:
        return x.copy()
    parts = [x]
    for l in range(L):
        scaled = (2.0 ** l) * np.pi * x
        parts.append(np.sin(scaled))
        parts.append(np.cos(scaled))
    return np.concatenate(parts, axis=-1)


class ForwardCache:
    __slots__ = ("trunk_acts", "sigma_raw", "color_in", "color_hidden_act",
                 "color_out", "seg_cache")

    def __init__(self):
        for name in self.__slots__:
            setattr(self, name, None)


def forward(params: FieldParams, x: np.ndarray, dirs: np.ndarray | None = None,
            want_color: bool = True, want_seg: bool = True, keep_cache: bool = False):
    """Batched field evaluation.

    x: (B, 3) positions, dirs: (B, 3) unit view directions (required when
    want_color).  Returns a dict with sigma (B,), color (B, 3), seg (B, C_s),
    feat (B, W) and, when keep_cache, the intermediates needed by backward.
    """
    cfg = params.config
    dtype = params.dtype
    x = np.asarray(x, dtype=dtype)
    cache = ForwardCache() if keep_cache else None

    a = encode(x, cfg.l_pos)
    trunk_acts = [a]
    for i in range(cfg.trunk_depth):
        z = stable_matmul(a, params[f"trunk.{i}.w"]) + params[f"trunk.{i}.b"]
        a = relu(z)
        trunk_acts.append(a)
    feat = a

    sigma_raw = (stable_matmul(feat, params["sigma.w"]) + params["sigma.b"])[:, 0]
    sigma = softplus(sigma_raw)

    out = {"sigma": sigma, "feat": feat, "color": None, "seg": None, "cache": cache}
    if keep_cache:
        cache.trunk_acts = trunk_acts
        cache.sigma_raw = sigma_raw

    if want_color:
        if dirs is None:
            raise ValueError("color rendering needs view directions")
        enc_d = encode(np.asarray(dirs, dtype=dtype), cfg.l_dir)
        color_in = np.concatenate([feat, enc_d], axis=-1)
        h = relu(stable_matmul(color_in, params["color.0.w"]) + params["color.0.b"])
        color = sigmoid(stable_matmul(h, params["color.1.w"]) + params["color.1.b"])
        out["color"] = color
        if keep_cache:
            cache.color_in = color_in
            cache.color_hidden_act = h
            cache.color_out = color

    if want_seg:
        seg, seg_cache = seg_forward(params, feat, keep_cache=keep_cache)
        out["seg"] = seg
        if keep_cache:
            cache.seg_cache = seg_cache

    if not np.isfinite(sigma).all() \
            or (out["color"] is not None and not np.isfinite(out["color"]).all()) \
            or (out["seg"] is not None and not np.isfinite(out["seg"]).all()):
        raise DivergenceError("non-finite field output")
    return out


def seg_forward(params: FieldParams, feat: np.ndarray, keep_cache: bool = False):
    """Segmentation head on trunk features; returns (logits, cache)."""
    cfg = params.config
    acts = [feat]
    a = feat
    for i in range(cfg.seg_depth - 1):
        a = relu(stable_matmul(a, params[f"seg.{i}.w"]) + params[f"seg.{i}.b"])
        acts.append(a)
    last = cfg.seg_depth - 1
    logits = stable_matmul(a, params[f"seg.{last}.w"]) + params[f"seg.{last}.b"]
    return logits, (acts if keep_cache else None)


def seg_backward(params: FieldParams, seg_cache, d_seg: np.ndarray,
                 grad: np.ndarray | None = None) -> np.ndarray:
    """Gradient of sum(d_seg * logits) wrt seg-head parameters only."""
    if grad is None:
        grad = params.zero_grad()
    gview = FieldParams(params.config, grad)
    cfg = params.config
    acts = seg_cache
    g = np.asarray(d_seg, dtype=params.dtype)
    for i in range(cfg.seg_depth - 1, -1, -1):
        gview[f"seg.{i}.w"] += acts[i].T @ g
        gview[f"seg.{i}.b"] += g.sum(axis=0)
        if i > 0:
            g = (g @ params[f"seg.{i}.w"].T) * (acts[i] > 0)
    return grad


def backward(params: FieldParams, cache: ForwardCache,
             d_color: np.ndarray | None = None, d_sigma: np.ndarray | None = None,
             d_seg: np.ndarray | None = None, grad: np.ndarray | None = None) -> np.ndarray:
    """Exact gradient of sum(d_color*color + d_sigma*sigma + d_seg*seg) over
    the batch, wrt every parameter.  Returns a flat gradient vector."""
    if grad is None:
        grad = params.zero_grad()
    gview = FieldParams(params.config, grad)
    cfg = params.config
    dtype = params.dtype
    feat = cache.trunk_acts[-1]
    dfeat = np.zeros_like(feat)

    if d_seg is not None:
        if cache.seg_cache is None:
            raise ValueError("forward was run without want_seg")
        g = np.asarray(d_seg, dtype=dtype)
        acts = cache.seg_cache
        for i in range(cfg.seg_depth - 1, -1, -1):
            gview[f"seg.{i}.w"] += acts[i].T @ g
            gview[f"seg.{i}.b"] += g.sum(axis=0)
            g = (g @ params[f"seg.{i}.w"].T)
            if i > 0:
                g *= acts[i] > 0
        dfeat += g

    if d_sigma is not None:
        dsr = (np.asarray(d_sigma, dtype=dtype) * sigmoid(cache.sigma_raw))[:, None]
        gview["sigma.w"] += feat.T @ dsr
        gview["sigma.b"] += dsr.sum(axis=0)
        dfeat += dsr @ params["sigma.w"].T

    if d_color is not None:
        if cache.color_out is None:
            raise ValueError("forward was run without want_color")
        c = cache.color_out
        dz2 = np.asarray(d_color, dtype=dtype) * c * (1.0 - c)
        gview["color.1.w"] += cache.color_hidden_act.T @ dz2
        gview["color.1.b"] += dz2.sum(axis=0)
        dh = (dz2 @ params["color.1.w"].T) * (cache.color_hidden_act > 0)
        gview["color.0.w"] += cache.color_in.T @ dh
        gview["color.0.b"] += dh.sum(axis=0)
        dfeat += (dh @ params["color.0.w"].T)[:, :cfg.trunk_width]

    g = dfeat
    for i in range(cfg.trunk_depth - 1, -1, -1):
        g = g * (cache.trunk_acts[i + 1] > 0)
        gview[f"trunk.{i}.w"] += cache.trunk_acts[i].T @ g
        gview[f"trunk.{i}.b"] += g.sum(axis=0)
        if i > 0:
            g = g @ params[f"trunk.{i}.w"].T
    return grad
