"""Losses, ray batches, the joint training step and checkpoints.

One ``train_step`` minimises

    lambda_r * L_r + lambda_f * L_f + lambda_p * L_reg

over the field MLP, the refinement adapter and the per-camera residuals.
Parameter groups whose loss weight is zero are not stepped at all, so their
values and optimiser moments stay bit-identical.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import tensorio
from .adapter import AdapterWeights, adapter_forward_torch, init_adapter
from .camera import K_PARAMS, CameraParams, init_preconditioner, proxy_points
from .errors import FormatError, NonFiniteError, ValidationError
from .field import FieldState, init_field
from .params import AdamState
from .render import RenderConfig, camera_ray_tensors, pixel_grid, render_rays_torch
from .scene import LatentImage, SceneDataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 1.0
    lambda_f: float = 0.0
    lambda_p: float = 0.0

    def __post_init__(self):
        if min(self.lambda_r, self.lambda_f, self.lambda_p) < 0:
            raise ValidationError("loss weights must be non-negative")


def _as_array(x):
    if isinstance(x, LatentImage):
        return x.data
    if isinstance(x, torch.Tensor):
        return x
    return np.asarray(x)


def loss_reconstruction(pred, target):
    """Mean over rays (pixels) of the squared L2 distance between 4-vectors.

    Accepts LatentImages, arrays of shape ``(..., 4)`` or torch tensors; a
    torch input returns a differentiable scalar tensor.
    """
    p, t = _as_array(pred), _as_array(target)
    if tuple(p.shape) != tuple(t.shape):
        raise ValidationError(f"shape mismatch {tuple(p.shape)} vs {tuple(t.shape)}")
    if isinstance(p, torch.Tensor) or isinstance(t, torch.Tensor):
        p = torch.as_tensor(p)
        t = torch.as_tensor(t, dtype=p.dtype)
        return ((p - t) ** 2).sum(-1).mean()
    diff = np.asarray(p, dtype=np.float64) - np.asarray(t, dtype=np.float64)
    return float((diff * diff).sum(-1).mean())


def loss_total(l_r, l_f, l_reg, w: LossWeights):
    return w.lambda_r * l_r + w.lambda_f * l_f + w.lambda_p * l_reg


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class RayBatch:
    """Pixels to supervise.  ``full_view`` is set when the batch is one whole view in row-major order."""

    views: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    targets: np.ndarray
    full_view: int | None = None

    def __post_init__(self):
        if len(self.views) == 0:
            raise ValidationError("empty ray batch")

    def __len__(self):
        return len(self.views)


def random_ray_batch(dataset: SceneDataset, n_rays: int, rng) -> RayBatch:
    h, w = dataset.latent_shape[:2]
    views = rng.integers(0, dataset.n_views, n_rays)
    rows = rng.integers(0, h, n_rays)
    cols = rng.integers(0, w, n_rays)
    stack = np.stack([z.data for z in dataset.latents])
    return RayBatch(views, rows, cols, stack[views, rows, cols].astype(np.float64))


def full_view_batch(dataset: SceneDataset, view: int) -> RayBatch:
    h, w = dataset.latent_shape[:2]
    rows, cols = pixel_grid(h, w)
    views = np.full(len(rows), view)
    return RayBatch(views, rows, cols, dataset.latents[view].data.reshape(-1, 4).astype(np.float64), full_view=view)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr_field: float = 1e-3
    lr_adapter: float = 1e-3
    lr_camera: float = 1e-4
    rays_per_batch: int = 1024
    render: RenderConfig = field(default_factory=lambda: RenderConfig(samples_per_ray=64, stratified=True))


@dataclass
class TrainState:
    field: FieldState
    adapter: AdapterWeights
    cameras: list
    delta_phi: torch.Tensor
    precond: torch.Tensor
    phi0: torch.Tensor
    latent_shape: tuple
    near: float
    far: float
    downscale: int
    config: TrainConfig
    opt: dict
    step: int = 0

    @classmethod
    def create(
        cls,
        dataset: SceneDataset,
        seed: int = 0,
        dtype=torch.float32,
        adapter_channels: int = 256,
        config: TrainConfig | None = None,
        bounds=((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5)),
        field_arch: dict | None = None,
    ) -> "TrainState":
        config = config or TrainConfig()
        fld = init_field(seed, dtype, **(field_arch or {}))
        ad = init_adapter(adapter_channels, seed + 1, dtype)
        pts = proxy_points(bounds[0], bounds[1], 32, seed)
        cams = [init_preconditioner(c, pts) for c in dataset.cameras]
        n = len(cams)
        return cls(
            field=fld,
            adapter=ad,
            cameras=cams,
            delta_phi=torch.zeros(n, K_PARAMS, dtype=torch.float64),
            precond=torch.as_tensor(np.stack([c.precond for c in cams])),
            phi0=torch.as_tensor(np.stack([c.phi0 for c in cams])),
            latent_shape=tuple(dataset.latent_shape),
            near=dataset.near,
            far=dataset.far,
            downscale=dataset.downscale_factor,
            config=config,
            opt={
                "field": AdamState.zeros_like(fld.params, config.lr_field),
                "adapter": AdamState.zeros_like(ad.params, config.lr_adapter),
                "camera": AdamState.zeros_like(torch.zeros(n, K_PARAMS, dtype=torch.float64), config.lr_camera),
            },
        )

    def current_cameras(self) -> list:
        dp = self.delta_phi.numpy()
        return [c.with_residual(dp[i]) for i, c in enumerate(self.cameras)]

    def phi(self, delta_phi=None):
        dp = self.delta_phi if delta_phi is None else delta_phi
        return self.phi0 + torch.einsum("nij,nj->ni", self.precond, dp)


@dataclass
class LossReport:
    step: int
    loss_r: float
    loss_f: float | None
    loss_reg: float
    total: float
    weights: LossWeights

    def as_dict(self) -> dict:
        return {"step": self.step, "loss_r": self.loss_r, "loss_f": self.loss_f, "loss_reg": self.loss_reg}


def compute_losses(ts: TrainState, batch: RayBatch, weights: LossWeights, field_params, adapter_params, delta_phi, rng=None):
    """Differentiable loss components for ``batch`` given explicit parameter tensors."""
    dtype = ts.field.dtype
    origins, dirs = [], []
    order = []
    # camera graph only when the residuals are being differentiated
    with torch.set_grad_enabled(torch.is_grad_enabled() and delta_phi.requires_grad):
        phi = ts.phi(delta_phi)
        for v in np.unique(batch.views):
            idx = np.nonzero(batch.views == v)[0]
            o, d = camera_ray_tensors(ts.cameras[v], batch.rows[idx], batch.cols[idx], ts.downscale, dtype, phi=phi[v])
            origins.append(o)
            dirs.append(d)
            order.append(idx)
    perm = np.concatenate(order)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    o = torch.cat(origins)[inv]
    d = torch.cat(dirs)[inv]
    pred, _, _ = render_rays_torch(ts.field, o, d, ts.near, ts.far, ts.config.render, rng, params=field_params)
    target = torch.as_tensor(batch.targets, dtype=dtype)
    l_r = loss_reconstruction(pred, target)
    l_f = None
    if batch.full_view is not None:
        h, w = ts.latent_shape[:2]
        refined = adapter_forward_torch(adapter_params, ts.adapter.channels, pred.reshape(h, w, 4))
        l_f = loss_reconstruction(refined.reshape(-1, 4), target)
    diff = torch.einsum("nij,nj->ni", ts.precond, delta_phi)
    l_reg = (diff * diff).sum()
    return l_r, l_f, l_reg


def train_step(ts: TrainState, batch: RayBatch, weights: LossWeights, rng=None) -> LossReport:
    """One Adam step on the weighted loss; mutates ``ts`` in place."""
    fp = ts.field.params.detach().clone().requires_grad_(True)
    use_adapter = weights.lambda_f > 0 and batch.full_view is not None
    use_camera = weights.lambda_p > 0
    ap = ts.adapter.params.detach().clone().requires_grad_(use_adapter)
    dp = ts.delta_phi.detach().clone().requires_grad_(use_camera)

    l_r, l_f, l_reg = compute_losses(ts, batch, weights, fp, ap, dp, rng)
    total = weights.lambda_r * l_r + weights.lambda_p * l_reg.to(l_r.dtype)
    if l_f is not None and weights.lambda_f > 0:
        total = total + weights.lambda_f * l_f
    if not bool(torch.isfinite(total)):
        raise NonFiniteError(
            f"non-finite loss at step {ts.step}",
            snapshot={"step": ts.step, "loss_r": float(l_r.detach()), "loss_reg": float(l_reg.detach())},
        )
    wrt = [fp] + ([ap] if use_adapter else []) + ([dp] if use_camera else [])
    grads = torch.autograd.grad(total, wrt)

    groups = [("field", fp, grads[0])]
    if use_adapter:
        groups.append(("adapter", ap, grads[1]))
    if use_camera:
        groups.append(("camera", dp, grads[-1]))
    saved = {k: (ts.opt[k].m.clone(), ts.opt[k].v.clone(), ts.opt[k].step) for k, _, _ in groups}
    new = {}
    for key, p, g in groups:
        new[key] = ts.opt[key].update(p.detach(), g)
    if not all(bool(torch.isfinite(t).all()) for t in new.values()):
        for key, (m, v, s) in saved.items():
            ts.opt[key].m, ts.opt[key].v, ts.opt[key].step = m, v, s
        raise NonFiniteError(f"non-finite parameters after step {ts.step}", snapshot={"step": ts.step})

    ts.field = FieldState(new["field"], **ts.field.arch(), step_count=ts.field.step_count + 1)
    if "adapter" in new:
        ts.adapter = AdapterWeights(new["adapter"], ts.adapter.channels)
    if "camera" in new:
        ts.delta_phi = new["camera"]
    ts.step += 1
    return LossReport(
        step=ts.step - 1,
        loss_r=float(l_r.detach()),
        loss_f=None if l_f is None else float(l_f.detach()),
        loss_reg=float(l_reg.detach()),
        total=float(total.detach()),
        weights=weights,
    )


# ---------------------------------------------------------------------------
# schedules and loops
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Phase:
    start: int
    end: int
    weights: LossWeights


def weights_at(phases, step: int) -> LossWeights:
    for ph in phases:
        if ph.start <= step < ph.end:
            return ph.weights
    return phases[-1].weights


def step_rng(seed: int, step: int):
    return np.random.default_rng([seed, step])


def make_batch(ts: TrainState, dataset: SceneDataset, weights: LossWeights, rng, step: int) -> RayBatch:
    """Whole-view batches while the adapter trains, random rays otherwise."""
    if weights.lambda_f > 0:
        return full_view_batch(dataset, step % dataset.n_views)
    return random_ray_batch(dataset, ts.config.rays_per_batch, rng)


def fit(ts: TrainState, dataset: SceneDataset, phases, steps: int, seed: int = 0, callback=None) -> list:
    """Run ``steps`` training steps starting at ``ts.step`` (so resuming continues the schedule)."""
    reports = []
    end = ts.step + steps
    while ts.step < end:
        w = weights_at(phases, ts.step)
        rng = step_rng(seed, ts.step)
        batch = make_batch(ts, dataset, w, rng, ts.step)
        rep = train_step(ts, batch, w, rng)
        reports.append(rep)
        if callback is not None:
            callback(rep)
    return reports


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(ts: TrainState, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    tensorio.write_tensor(root / "field.lte", ts.field.params.numpy())
    tensorio.write_tensor(root / "adapter.lte", ts.adapter.params.numpy())
    tensorio.write_tensor(root / "delta_phi.lte", ts.delta_phi.numpy())
    tensorio.write_tensor(root / "precond.lte", ts.precond.numpy())
    opt_meta = {}
    for key, st in ts.opt.items():
        tensorio.write_tensor(root / f"adam_{key}_m.lte", st.m.numpy())
        tensorio.write_tensor(root / f"adam_{key}_v.lte", st.v.numpy())
        opt_meta[key] = {"step": st.step, "lr": st.lr}
    meta = {
        "step_count": ts.field.step_count,
        "train_step": ts.step,
        "encoding_bands": ts.field.encoding_bands,
        "layer_dims": ts.field.layer_dims,
        "field_arch": ts.field.arch(),
        "adapter_channels": ts.adapter.channels,
        "cameras": [c.to_json() for c in ts.cameras],
        "latent_shape": list(ts.latent_shape),
        "near": ts.near,
        "far": ts.far,
        "downscale_factor": ts.downscale,
        "optimizer": opt_meta,
        "rays_per_batch": ts.config.rays_per_batch,
        "samples_per_ray": ts.config.render.samples_per_ray,
        "stratified": ts.config.render.stratified,
    }
    (root / "checkpoint.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def load_checkpoint(path, config: TrainConfig | None = None) -> TrainState:
    root = Path(path)
    mpath = root / "checkpoint.json"
    if not mpath.exists():
        raise FormatError(f"no checkpoint.json in {root}")
    meta = json.loads(mpath.read_text())
    fp = torch.as_tensor(tensorio.read_tensor(root / "field.lte"))
    fld = FieldState(fp, **meta["field_arch"], step_count=meta["step_count"])
    ad = AdapterWeights(torch.as_tensor(tensorio.read_tensor(root / "adapter.lte")), meta["adapter_channels"])
    dp = torch.as_tensor(tensorio.read_tensor(root / "delta_phi.lte"))
    pc = torch.as_tensor(tensorio.read_tensor(root / "precond.lte"))
    cams = []
    for i, cj in enumerate(meta["cameras"]):
        c = CameraParams.from_json(cj)
        cams.append(CameraParams(c.rotation, c.translation, c.focal, c.principal, c.distortion, precond=pc[i].numpy()))
    if config is None:
        config = TrainConfig(
            rays_per_batch=meta["rays_per_batch"],
            render=RenderConfig(samples_per_ray=meta["samples_per_ray"], stratified=meta["stratified"]),
        )
    opt = {}
    for key, om in meta["optimizer"].items():
        m = torch.as_tensor(tensorio.read_tensor(root / f"adam_{key}_m.lte"))
        v = torch.as_tensor(tensorio.read_tensor(root / f"adam_{key}_v.lte"))
        opt[key] = AdamState(m, v, om["step"], om["lr"])
    return TrainState(
        field=fld,
        adapter=ad,
        cameras=cams,
        delta_phi=dp,
        precond=pc,
        phi0=torch.as_tensor(np.stack([c.phi0 for c in cams])),
        latent_shape=tuple(meta["latent_shape"]),
        near=meta["near"],
        far=meta["far"],
        downscale=meta["downscale_factor"],
        config=config,
        opt=opt,
        step=meta["train_step"],
    )


def render_all(ts: TrainState, cfg: RenderConfig | None = None, refine: bool = True) -> list:
    """Deterministic renders of every view at the current state."""
    from .render import render_view

    cfg = cfg or RenderConfig(samples_per_ray=ts.config.render.samples_per_ray, stratified=False)
    return [
        render_view(ts.field, ts.adapter if refine else None, cam, cfg, ts.latent_shape, ts.near, ts.far, ts.downscale, n)
        for n, cam in enumerate(ts.current_cameras())
    ]


def rms_error(renders, latents) -> float:
    errs = [np.mean((np.asarray(r.data, dtype=np.float64) - z.data) ** 2) for r, z in zip(renders, latents)]
    return math.sqrt(float(np.mean(errs)))
