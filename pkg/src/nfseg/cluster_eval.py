"""K-means over rendered segmentation logits, and evaluation metrics:
novel-view adjusted Rand index (NV-ARI), per-class IoU / mIoU under
best-permutation label matching, PSNR, and SSIM.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import permutations
from math import log10

import numpy as np

from .render import render_view
from .scene import Scene, SceneError, sample_features_at

PSNR_CAP_DB = 99.0


@dataclass
class ClusterModel:
    centers: np.ndarray    # (n_clusters, C)
    n_clusters: int
    seed: int
    inertia: float


@dataclass
class SegMetrics:
    nv_ari: float
    iou_bg: float
    iou_fg: float
    miou: float


def fit_kmeans(points: np.ndarray, n_clusters: int, seed: int,
               max_iter: int = 100, tol: float = 1e-6) -> ClusterModel:
    """Seeded k-means++ initialization plus Lloyd iterations.

    Deterministic given (points, n_clusters, seed).  An empty cluster is
    reseeded to the point farthest from its assigned center.
    """
    x = np.asarray(points, dtype=np.float64)
    m = x.shape[0]
    if m < n_clusters:
        raise ValueError(f"need at least {n_clusters} points, got {m}")
    rng = np.random.default_rng(seed)

    centers = np.empty((n_clusters, x.shape[1]), dtype=np.float64)
    centers[0] = x[int(rng.integers(m))]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, n_clusters):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(m, p=d2 / total))
        else:
            idx = int(rng.integers(m))
        centers[i] = x[idx]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(axis=1))

    labels = _assign_points(x, centers)
    for _ in range(max_iter):
        new_centers = centers.copy()
        for c in range(n_clusters):
            sel = labels == c
            if sel.any():
                new_centers[c] = x[sel].mean(axis=0)
        # reseed empty clusters to the farthest point from its center
        dist_own = ((x - new_centers[labels]) ** 2).sum(axis=1)
        taken = set()
        for c in range(n_clusters):
            if not (labels == c).any():
                order = np.argsort(-dist_own, kind="stable")
                pick = next(int(i) for i in order if int(i) not in taken)
                taken.add(pick)
                new_centers[c] = x[pick]
        shift = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
        centers = new_centers
        labels = _assign_points(x, centers)
        if shift < tol:
            break
    inertia = float(((x - centers[labels]) ** 2).sum())
    return ClusterModel(centers=centers, n_clusters=n_clusters, seed=seed, inertia=inertia)


def _assign_points(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)   # first minimum = lowest center index on ties


def assign(model: ClusterModel, logits: np.ndarray) -> np.ndarray:
    """Nearest-center label per pixel; ties go to the lowest center index."""
    flat = np.asarray(logits, dtype=np.float64).reshape(-1, model.centers.shape[1])
    return _assign_points(flat, model.centers).reshape(np.asarray(logits).shape[:-1])


# ---------------------------------------------------------------------------
# clustering / segmentation metrics
# ---------------------------------------------------------------------------

def _comb2(x):
    return x * (x - 1.0) / 2.0


def ari(pred: np.ndarray, truth: np.ndarray) -> float:
    """Adjusted Rand index between two labelings of the same pixels."""
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.size == 0 or pred.shape != truth.shape:
        raise ValueError("labelings must be non-empty and aligned")
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    n_pred = pi.max() + 1
    n_truth = ti.max() + 1
    n = pred.size
    if (n_pred == n_truth == 1) or (n_pred == n_truth == n):
        return 1.0
    cont = np.zeros((n_pred, n_truth), dtype=np.int64)
    np.add.at(cont, (pi, ti), 1)
    sum_ij = _comb2(cont.astype(np.float64)).sum()
    a = _comb2(cont.sum(axis=1).astype(np.float64)).sum()
    b = _comb2(cont.sum(axis=0).astype(np.float64)).sum()
    expected = a * b / _comb2(float(n))
    max_index = 0.5 * (a + b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def iou_per_class(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> np.ndarray:
    """IoU for labels 0..n_classes-1; a class absent from both sides gets 1."""
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError("mask size mismatch")
    ious = np.empty(n_classes, dtype=np.float64)
    for c in range(n_classes):
        p = pred == c
        t = truth == c
        union = (p | t).sum()
        ious[c] = 1.0 if union == 0 else (p & t).sum() / union
    return ious


def best_permutation_iou(pred: np.ndarray, truth: np.ndarray, n_classes: int):
    """Per-class IoU under the pred-label permutation maximizing mIoU."""
    pred = np.asarray(pred).astype(np.int64)
    truth = np.asarray(truth).astype(np.int64)
    best = None
    for perm in permutations(range(n_classes)):
        mapping = np.asarray(perm)
        ious = iou_per_class(mapping[pred], truth, n_classes)
        miou = float(ious.mean())
        if best is None or miou > best[0]:
            best = (miou, ious, perm)
    return best  # (miou, per-class ious, permutation)


def iou_metrics(pred_mask: np.ndarray, truth_mask: np.ndarray) -> SegMetrics:
    """Two-class IoU fragment under best-permutation matching.

    ARI is filled by the caller; this only computes the IoU family.
    """
    miou, ious, _ = best_permutation_iou(np.asarray(pred_mask).astype(int) > 0,
                                         np.asarray(truth_mask).astype(int) > 0, 2)
    return SegMetrics(nv_ari=float("nan"), iou_bg=float(ious[0]),
                      iou_fg=float(ious[1]), miou=miou)


# ---------------------------------------------------------------------------
# image quality metrics
# ---------------------------------------------------------------------------

def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; 99 dB caps MSE=0."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError("shape mismatch")
    mse = float(((img - ref) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * log10(mse))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _window_means(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, kernel.shape)
    return np.tensordot(win, kernel, axes=([2, 3], [0, 1]))


def ssim(img: np.ndarray, ref: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Structural similarity with an 11x11 gaussian window (sigma 1.5) on
    [0, 1] images, averaged over valid windows and channels."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError("shape mismatch")
    if img.ndim == 2:
        img = img[:, :, None]
        ref = ref[:, :, None]
    if min(img.shape[0], img.shape[1]) < window:
        raise ValueError(f"image smaller than the {window}x{window} SSIM window")
    c1 = k1 * k1
    c2 = k2 * k2
    kernel = _gaussian_kernel(window, sigma)
    vals = []
    for ch in range(img.shape[2]):
        x = img[:, :, ch]
        y = ref[:, :, ch]
        mu_x = _window_means(x, kernel)
        mu_y = _window_means(y, kernel)
        var_x = _window_means(x * x, kernel) - mu_x ** 2
        var_y = _window_means(y * y, kernel) - mu_y ** 2
        cov = _window_means(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
        vals.append(float((num / den).mean()))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# whole-scene evaluation
# ---------------------------------------------------------------------------

def evaluate_scene(params, scene: Scene, n_clusters: int = 2, seed: int = 0,
                   n_samples: int = 32, chunk_size: int = 4096,
                   fg_by_activation: bool = False):
    """Render all test views, cluster pooled logits, score against masks.

    Returns (SegMetrics of means, per-view rows, extras) where extras holds
    the pooled-ARI variant and the fitted cluster model.
    """
    test_views = scene.test_views
    if not test_views:
        raise SceneError("scene has no test views")
    for v in test_views:
        if v.mask is None:
            raise SceneError(f"test view {v.view_id} has no ground-truth mask")

    renders = [render_view(params, scene.camera, v.pose, n_samples, chunk_size)
               for v in test_views]
    pooled = np.concatenate([r.seg.reshape(-1, r.seg.shape[-1]) for r in renders])
    model = fit_kmeans(pooled, n_clusters, seed)

    fg_cluster = None
    if fg_by_activation and n_clusters == 2 and all(v.features is not None for v in test_views):
        fg_cluster = _cluster_by_activation(model, renders, test_views, scene)

    rows = []
    all_pred = []
    all_truth = []
    for v, r in zip(test_views, renders):
        labels = assign(model, r.seg)
        all_pred.append(labels.ravel())
        all_truth.append(v.mask.ravel())
        view_ari = ari(labels, v.mask)
        n_cls = max(n_clusters, int(v.mask.max()) + 1, 2)
        if n_cls == 2:
            if fg_cluster is not None:
                ious = iou_per_class(labels == fg_cluster, v.mask > 0, 2)
                miou, iou_bg, iou_fg = float(ious.mean()), float(ious[0]), float(ious[1])
            else:
                frag = iou_metrics(labels, v.mask)
                miou, iou_bg, iou_fg = frag.miou, frag.iou_bg, frag.iou_fg
        else:
            miou, ious, _ = best_permutation_iou(labels, v.mask, n_cls)
            iou_bg, iou_fg = float(ious[0]), float(ious[1:].mean())
        rows.append({
            "view": v.view_id,
            "psnr": psnr(r.color, v.image),
            "ssim": ssim(r.color, v.image),
            "nv_ari": view_ari,
            "iou_bg": iou_bg,
            "iou_fg": iou_fg,
            "miou": miou,
        })

    means = {k: float(np.mean([row[k] for row in rows]))
             for k in ("psnr", "ssim", "nv_ari", "iou_bg", "iou_fg", "miou")}
    pooled_ari = ari(np.concatenate(all_pred), np.concatenate(all_truth))
    metrics = SegMetrics(nv_ari=means["nv_ari"], iou_bg=means["iou_bg"],
                         iou_fg=means["iou_fg"], miou=means["miou"])
    extras = {"pooled_ari": pooled_ari, "model": model,
              "psnr": means["psnr"], "ssim": means["ssim"]}
    return metrics, rows, extras


def _cluster_by_activation(model, renders, views, scene):
    """Foreground = cluster whose pixels carry the larger mean feature norm."""
    sums = np.zeros(model.n_clusters)
    counts = np.zeros(model.n_clusters)
    h, w = scene.camera.height, scene.camera.width
    ys, xs = np.mgrid[0:h, 0:w]
    for v, r in zip(views, renders):
        labels = assign(model, r.seg).ravel()
        feats = sample_features_at(v.features, xs.ravel(), ys.ravel(), (w, h))
        norms = np.linalg.norm(feats, axis=-1)
        for c in range(model.n_clusters):
            sel = labels == c
            sums[c] += norms[sel].sum()
            counts[c] += sel.sum()
    means = sums / np.maximum(counts, 1)
    return int(np.argmax(means))


def write_eval_csv(path, rows, means, pooled_ari):
    """Per-view table in the standard column order plus mean/pooled rows."""
    cols = ["view", "psnr", "ssim", "nv_ari", "iou_bg", "iou_fg", "miou"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([row["view"]] + [f"{row[c]:.6f}" for c in cols[1:]])
        writer.writerow(["mean"] + [f"{means[c]:.6f}" for c in cols[1:]])
        writer.writerow(["pooled", "", "", f"{pooled_ari:.6f}", "", "", ""])


def format_eval_table(rows, means, pooled_ari) -> str:
    header = f"{'view':<12}{'PSNR':>8}{'SSIM':>8}{'NV-ARI':>9}{'IoU(BG)':>9}{'IoU(FG)':>9}{'mIoU':>8}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(f"{row['view']:<12}{row['psnr']:>8.2f}{row['ssim']:>8.4f}"
                     f"{row['nv_ari']:>9.4f}{row['iou_bg']:>9.4f}{row['iou_fg']:>9.4f}{row['miou']:>8.4f}")
    lines.append("-" * len(header))
    lines.append(f"{'mean':<12}{means['psnr']:>8.2f}{means['ssim']:>8.4f}"
                 f"{means['nv_ari']:>9.4f}{means['iou_bg']:>9.4f}{means['iou_fg']:>9.4f}{means['miou']:>8.4f}")
    lines.append(f"pooled NV-ARI: {pooled_ari:.4f}")
    return "\n".join(lines)
