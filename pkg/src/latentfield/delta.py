"""Prompt-aware edit masks: delta scores, thresholding, K-medoids and cross-view consolidation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .camera import apply_residual, project_torch
from .diffusion import NoiseSchedule, add_noise
from .errors import ValidationError
from .render import RenderConfig, camera_ray_tensors, render_depth


@dataclass
class DeltaScores:
    data: np.ndarray
    view_id: int = 0
    delta_t_used: float = 0.75

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 4:
            raise ValidationError(f"delta scores must be (H, W, 4), got {self.data.shape}")
        if np.any(self.data < 0) or not np.all(np.isfinite(self.data)):
            raise ValidationError("delta scores must be finite and non-negative")


@dataclass
class Mask:
    data: np.ndarray
    threshold_used: float = 0.45

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValidationError(f"mask must be 2-D, got shape {arr.shape}")
        if not np.all((arr == 0) | (arr == 1)):
            raise ValidationError("mask entries must be exactly 0 or 1")
        self.data = arr.astype(np.uint8)

    @property
    def area_frac(self) -> float:
        return float(self.data.mean())

    def as_bool(self) -> np.ndarray:
        return self.data.astype(bool)


def delta_scores(d, z, image_cond, text_cond, sched: NoiseSchedule, seed=0) -> DeltaScores:
    """``|eps(z_dt, I, C) - eps(z_dt, I, null)|`` at noise level ``delta_t``.

    Both denoiser calls see the same noised latent.
    """
    from .diffusion import NULL_TEXT

    z_dt, eps = add_noise(z, sched.delta_t, sched, seed)
    record = getattr(d, "record_noise", None)
    if record is not None:
        record(np.asarray(getattr(z, "data", z), dtype=np.float64), eps, sched.index(sched.delta_t))
    t = sched.index(sched.delta_t)
    cond = np.asarray(d(z_dt, t, image_cond, text_cond), dtype=np.float64)
    uncond = np.asarray(d(z_dt, t, image_cond, NULL_TEXT), dtype=np.float64)
    return DeltaScores(np.abs(cond - uncond), getattr(z, "view_id", 0), sched.delta_t)


def normalized_score(scores: DeltaScores, rel_tol: float = 1e-9) -> np.ndarray:
    """Channel mean, min-max scaled to [0, 1].

    A constant map carries no contrast: it becomes all ones if it is
    positive (the whole frame changed) and all zeros otherwise.  Spread
    below ``rel_tol * max`` is round-off and counts as constant.
    """
    s = scores.data.mean(axis=2)
    lo, hi = float(s.min()), float(s.max())
    if hi - lo <= rel_tol * abs(hi):
        return np.full(s.shape, 1.0 if hi > 0 else 0.0)
    return (s - lo) / (hi - lo)


def threshold_mask(scores: DeltaScores, mu: float = 0.45) -> Mask:
    if not 0.0 <= mu <= 1.0:
        raise ValidationError(f"mu must lie in [0, 1], got {mu}")
    return Mask((normalized_score(scores) >= mu).astype(np.uint8), mu)


# ---------------------------------------------------------------------------
# k-medoids
# ---------------------------------------------------------------------------


def _pam(points: np.ndarray, k: int, max_iter: int = 100) -> np.ndarray:
    """Partitioning Around Medoids (greedy BUILD then best-improvement SWAP)."""
    dist = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(-1))
    n = len(points)
    medoids = [int(np.argmin(dist.sum(1)))]
    nearest = dist[medoids[0]].copy()
    for _ in range(1, k):
        gain = np.maximum(nearest[None, :] - dist, 0.0).sum(1)
        gain[medoids] = -1.0
        m = int(np.argmax(gain))
        medoids.append(m)
        nearest = np.minimum(nearest, dist[m])
    medoids = np.array(medoids)
    cost = dist[medoids].min(0).sum()
    for _ in range(max_iter):
        best = (cost, None, None)
        for i in range(k):
            others = np.delete(medoids, i)
            base = dist[others].min(0) if len(others) else np.full(n, np.inf)
            trial = np.minimum(base[None, :], dist).sum(1)
            trial[medoids] = np.inf
            h = int(np.argmin(trial))
            if trial[h] < best[0] - 1e-12:
                best = (trial[h], i, h)
        if best[1] is None:
            break
        medoids[best[1]] = best[2]
        cost = best[0]
    return medoids


def kmedoids_query_points(mask: Mask, k: int, seed=0, max_points: int = 2048) -> np.ndarray:
    """``k`` medoid pixel coordinates ``(row, col)`` of the mask's positive pixels.

    Masks with more than ``max_points`` positives are clustered on a seeded
    subsample.
    """
    pts = np.argwhere(mask.as_bool())
    if k < 1:
        raise ValidationError("k must be >= 1")
    if len(pts) < k:
        raise ValidationError(f"mask has {len(pts)} positive pixels, fewer than k={k}")
    if len(pts) > max_points:
        rng = np.random.default_rng(seed)
        pts = pts[np.sort(rng.choice(len(pts), max_points, replace=False))]
    idx = _pam(pts.astype(np.float64), k)
    return pts[np.sort(idx)]


def clustering_cost(points, medoids) -> float:
    p = np.asarray(points, dtype=np.float64)
    m = np.asarray(medoids, dtype=np.float64)
    return float(np.sqrt(((p[:, None, :] - m[None, :, :]) ** 2).sum(-1)).min(1).sum())


# ---------------------------------------------------------------------------
# consolidation
# ---------------------------------------------------------------------------


def _lift(camera, mask_bool, depth, acc, downscale, min_acc):
    rows, cols = np.nonzero(mask_bool & (acc > min_acc))
    if len(rows) == 0:
        return np.zeros((0, 3))
    with torch.no_grad():
        o, d = camera_ray_tensors(camera, rows, cols, downscale)
    return o.numpy() + depth[rows, cols, None] * d.numpy()


def _footprint(camera, points, depth, shape, downscale, tol):
    h, w = shape
    foot = np.zeros((h, w), dtype=bool)
    if len(points) == 0:
        return foot
    phi = torch.as_tensor(apply_residual(camera))
    with torch.no_grad():
        uv, zc = project_torch(phi, torch.as_tensor(camera.rotation), torch.as_tensor(camera.distortion), torch.as_tensor(points))
    uv = uv.numpy() / downscale
    ok = zc.numpy() > 0
    col = np.floor(uv[:, 0]).astype(np.int64)
    row = np.floor(uv[:, 1]).astype(np.int64)
    ok &= (row >= 0) & (row < h) & (col >= 0) & (col < w)
    row, col, pts = row[ok], col[ok], points[ok]
    dist = np.linalg.norm(pts - phi.numpy()[3:6], axis=1)
    visible = np.abs(dist - depth[row, col]) <= tol
    foot[row[visible], col[visible]] = True
    return foot


def _close(mask):
    pad = np.pad(mask, 2)
    return ndimage.binary_closing(pad)[2:-2, 2:-2]


def _open(mask):
    pad = np.pad(mask, 2, mode="edge")
    return ndimage.binary_opening(pad)[2:-2, 2:-2]


def consolidate_masks(
    masks,
    scene,
    field,
    cameras=None,
    render_cfg: RenderConfig | None = None,
    depth_maps=None,
    depth_tol: float = 0.1,
    min_acc: float = 1e-3,
    query_points: int = 8,
    seed=0,
) -> list:
    """Make per-view masks geometrically consistent.

    Positive pixels of every view are lifted to 3-D with the field's
    expected termination depth, pooled, and pushed into every view.  Hits
    that agree with the target view's own depth form a footprint; the
    footprint is closed to fill sampling holes, and the pixels it adds are
    opened so that one-pixel slivers along an existing boundary are dropped.
    Each output is the union of the input mask with what survives.

    ``depth_maps`` (a list of ``(depth, acc)`` pairs) skips rendering.
    """
    masks = list(masks)
    if len(masks) != scene.n_views:
        raise ValidationError(f"expected {scene.n_views} masks, got {len(masks)}")
    if scene.n_views < 2:
        return [Mask(m.data.copy(), m.threshold_used) for m in masks]
    cams = scene.cameras if cameras is None else cameras
    shape = scene.latent_shape[:2]
    cfg = render_cfg or RenderConfig(samples_per_ray=64)
    if depth_maps is None:
        depth_maps = [render_depth(field, c, cfg, shape, scene.near, scene.far, scene.downscale_factor) for c in cams]

    pooled = []
    for n, (m, cam) in enumerate(zip(masks, cams)):
        pts = _lift(cam, m.as_bool(), *depth_maps[n], scene.downscale_factor, min_acc)
        if len(pts) == 0:
            continue
        # pool points cluster by cluster around their medoids
        mb = m.as_bool()
        k = min(query_points, int(mb.sum()))
        med = kmedoids_query_points(m, k, seed)
        rows, cols = np.nonzero(mb & (depth_maps[n][1] > min_acc))
        pix = np.stack([rows, cols], 1)
        owner = np.argmin(((pix[:, None, :] - med[None, :, :]) ** 2).sum(-1), axis=1)
        pooled.append(pts[np.argsort(owner, kind="stable")])
    if not pooled:
        return [Mask(m.data.copy(), m.threshold_used) for m in masks]
    points = np.concatenate(pooled)

    out = []
    for n, (m, cam) in enumerate(zip(masks, cams)):
        foot = _close(_footprint(cam, points, depth_maps[n][0], shape, scene.downscale_factor, depth_tol))
        mb = m.as_bool()
        added = _open(foot & ~mb)
        out.append(Mask((mb | added).astype(np.uint8), m.threshold_used))
    return out


def mask_iou(a, b) -> float:
    a = np.asarray(getattr(a, "data", a), dtype=bool)
    b = np.asarray(getattr(b, "data", b), dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def write_pgm(mask: Mask, path) -> Path:
    """Binary 8-bit PGM with 0/255 pixels."""
    path = Path(path)
    h, w = mask.data.shape
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + (mask.data * 255).astype(np.uint8).tobytes())
    return path


def read_pgm(path) -> Mask:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValidationError(f"{path} is not a binary PGM")
    w, h = map(int, parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
    return Mask((data > 127).astype(np.uint8))
