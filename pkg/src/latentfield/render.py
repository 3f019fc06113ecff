"""Ray generation and latent volume rendering by midpoint quadrature."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .camera import CameraParams, apply_residual, rays_torch
from .errors import ValidationError
from .field import FieldState, field_forward
from .scene import LatentImage


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValidationError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ValidationError("t_near must be < t_far")


@dataclass
class RenderConfig:
    samples_per_ray: int = 64
    background_latent: np.ndarray = field(default_factory=lambda: np.zeros(4))
    stratified: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValidationError("samples_per_ray must be >= 2")
        self.background_latent = np.asarray(self.background_latent, dtype=np.float64).reshape(4)


def sample_depths(n_rays, near, far, samples, stratified=False, rng=None, dtype=torch.float64):
    """Bin-centred (or jittered) depths; every bin has width ``(far - near) / samples``."""
    delta = (far - near) / samples
    if stratified:
        rng = rng if rng is not None else np.random.default_rng(0)
        offs = torch.as_tensor(rng.random((n_rays, samples)), dtype=dtype)
    else:
        offs = torch.full((n_rays, samples), 0.5, dtype=dtype)
    t = near + (torch.arange(samples, dtype=dtype) + offs) * delta
    return t, delta


def composite(z, sigma, delta, background):
    """Quadrature weights ``T_i (1 - exp(-sigma_i delta))`` and the blended latent.

    ``z``: (B, S, 4), ``sigma``: (B, S).  Returns ``(latent (B, 4), weights (B, S))``.
    """
    tau = sigma * delta
    trans = torch.exp(-(torch.cumsum(tau, 1) - tau))
    w = trans * (1.0 - torch.exp(-tau))
    bg = torch.as_tensor(background, dtype=z.dtype)
    out = (w[..., None] * z).sum(1) + (1.0 - w.sum(1, keepdim=True)) * bg
    return out, w


def render_rays_torch(field, origins, dirs, near, far, cfg: RenderConfig, rng=None, params=None):
    """Render a batch of rays.

    ``field`` is a FieldState (``params`` overrides its parameter vector, for
    differentiation) or any callable ``(pos, dirs) -> (z, sigma)``.
    Returns ``(latent (B, 4), weights (B, S), depths (B, S))``.
    """
    n = origins.shape[0]
    t, delta = sample_depths(n, near, far, cfg.samples_per_ray, cfg.stratified, rng, origins.dtype)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    d = dirs[:, None, :].expand_as(pts)
    if isinstance(field, FieldState):
        z, sigma = field_forward(field.params if params is None else params, field, pts.reshape(-1, 3), d.reshape(-1, 3))
    else:
        z, sigma = field(pts.reshape(-1, 3), d.reshape(-1, 3))
    s = cfg.samples_per_ray
    out, w = composite(z.reshape(n, s, 4), sigma.reshape(n, s), delta, cfg.background_latent)
    return out, w, t


def render_ray(field, ray: Ray, cfg: RenderConfig) -> np.ndarray:
    dtype = field.dtype if isinstance(field, FieldState) else torch.float64
    o = torch.as_tensor(ray.origin, dtype=dtype)[None]
    d = torch.as_tensor(ray.direction, dtype=dtype)[None]
    rng = np.random.default_rng(cfg.seed) if cfg.stratified else None
    with torch.no_grad():
        out, _, _ = render_rays_torch(field, o, d, ray.t_near, ray.t_far, cfg, rng)
    return out[0].numpy().astype(np.float64)


def ray_weights(field, ray: Ray, cfg: RenderConfig) -> np.ndarray:
    dtype = field.dtype if isinstance(field, FieldState) else torch.float64
    o = torch.as_tensor(ray.origin, dtype=dtype)[None]
    d = torch.as_tensor(ray.direction, dtype=dtype)[None]
    with torch.no_grad():
        _, w, _ = render_rays_torch(field, o, d, ray.t_near, ray.t_far, cfg)
    return w[0].numpy()


def _check_pixels(pixels, shape):
    px = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    h, w = shape[:2]
    bad = (px[:, 0] < 0) | (px[:, 0] >= h) | (px[:, 1] < 0) | (px[:, 1] >= w)
    if np.any(bad):
        raise ValidationError(f"pixel {tuple(px[np.argmax(bad)])} outside latent grid {(h, w)}")
    return px


def camera_ray_tensors(camera: CameraParams, rows, cols, downscale=1, dtype=torch.float64, phi=None):
    """Origins and directions as tensors; ``phi`` overrides the effective parameters."""
    if phi is None:
        phi = torch.as_tensor(apply_residual(camera), dtype=torch.float64)
    o, d = rays_torch(
        phi.to(torch.float64),
        torch.as_tensor(camera.rotation),
        torch.as_tensor(camera.distortion),
        torch.as_tensor(rows),
        torch.as_tensor(cols),
        downscale,
    )
    return o.to(dtype), d.to(dtype)


def generate_rays(camera: CameraParams, pixels, shape, near, far, downscale: int = 1) -> list:
    """One ray per ``(row, col)`` latent pixel through its centre."""
    px = _check_pixels(pixels, shape)
    with torch.no_grad():
        o, d = camera_ray_tensors(camera, px[:, 0], px[:, 1], downscale)
    return [Ray(o[i].numpy(), d[i].numpy(), near, far) for i in range(len(px))]


def pixel_grid(height: int, width: int):
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return rows.reshape(-1), cols.reshape(-1)


def _render_full(field, camera, cfg, shape, near, far, downscale, chunk):
    h, w = shape[:2]
    rows, cols = pixel_grid(h, w)
    dtype = field.dtype if isinstance(field, FieldState) else torch.float64
    outs, depths, accs = [], [], []
    with torch.no_grad():
        o, d = camera_ray_tensors(camera, rows, cols, downscale, dtype)
        rng = np.random.default_rng(cfg.seed) if cfg.stratified else None
        for a in range(0, len(rows), chunk):
            out, wts, t = render_rays_torch(field, o[a : a + chunk], d[a : a + chunk], near, far, cfg, rng)
            outs.append(out)
            acc = wts.sum(1)
            accs.append(acc)
            depths.append((wts * t).sum(1) / torch.clamp(acc, min=1e-12))
    return torch.cat(outs), torch.cat(depths), torch.cat(accs)


def render_view(
    field,
    adapter,
    camera: CameraParams,
    cfg: RenderConfig,
    shape,
    near: float,
    far: float,
    downscale: int = 1,
    view_id: int = 0,
    chunk: int = 8192,
) -> LatentImage:
    """Render every latent pixel of one view, then refine with the adapter if given."""
    from .adapter import adapter_forward

    h, w = shape[:2]
    out, _, _ = _render_full(field, camera, cfg, shape, near, far, downscale, chunk)
    img = out.reshape(h, w, 4).numpy()
    if adapter is not None:
        img = adapter_forward(adapter, img)
    return LatentImage(img, view_id)


def render_depth(field, camera, cfg, shape, near, far, downscale=1, chunk=8192):
    """Expected ray termination depth and accumulated weight per latent pixel."""
    h, w = shape[:2]
    _, depth, acc = _render_full(field, camera, cfg, shape, near, far, downscale, chunk)
    return depth.reshape(h, w).numpy(), acc.reshape(h, w).numpy()
