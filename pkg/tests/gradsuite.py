"""Central-difference gradient checks shared by the unit and acceptance suites.

All checks run in float64.  Probes whose perturbation flips a ReLU unit at
any sample point are skipped: across a kink the difference quotient is not a
derivative.  Each check returns ``(usable probes, total probes, relative
error)`` where the error compares the stacked directional derivatives.
"""

import numpy as np
import torch

from latentfield.adapter import adapter_forward_torch, init_adapter, loss_refinement
from latentfield.field import positional_encode
from latentfield.render import RenderConfig, camera_ray_tensors, sample_depths
from latentfield.training import LossWeights, RayBatch, TrainConfig, TrainState, compute_losses

H = 1e-4
TOL = 1e-4
ARCH = {"hidden": 16, "depth": 2}


def small_state(dataset, seed):
    cfg = TrainConfig(render=RenderConfig(samples_per_ray=8, stratified=False))
    ts = TrainState.create(dataset, seed=seed, dtype=torch.float64, adapter_channels=4, config=cfg, field_arch=ARCH)
    rng = np.random.default_rng(seed)
    ts.delta_phi = torch.as_tensor(rng.normal(size=ts.delta_phi.shape) * 1e-2)
    h, w = dataset.latent_shape[:2]
    n = 6
    views = rng.integers(0, dataset.n_views, n)
    rows, cols = rng.integers(0, h, n), rng.integers(0, w, n)
    stack = np.stack([z.data for z in dataset.latents])
    return ts, RayBatch(views, rows, cols, stack[views, rows, cols].astype(np.float64)), rng


def _sample_points(ts, batch, dp):
    phi = ts.phi(dp)
    pts = []
    for v in np.unique(batch.views):
        idx = batch.views == v
        o, d = camera_ray_tensors(ts.cameras[v], batch.rows[idx], batch.cols[idx], ts.downscale, torch.float64, phi=phi[v])
        t, _ = sample_depths(len(o), ts.near, ts.far, ts.config.render.samples_per_ray, dtype=torch.float64)
        pts.append((o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3))
    return torch.cat(pts)


def _pattern(field, params, pos):
    w = field.layout.unflatten(params)
    x = positional_encode(pos, field.encoding_bands)
    pats = []
    for i in range(field.depth):
        pre = x @ w[f"l{i}.w"] + w[f"l{i}.b"]
        pats.append(pre > 0)
        x = torch.relu(pre)
    return torch.cat(pats, -1)


def _probe(f, grad, x, directions, same_kinks):
    """Relative error ``|an - fd| / |an|`` over all usable probes (2-norms)."""
    an, fd = [], []
    with torch.no_grad():
        for e in directions:
            if not (same_kinks(x + e) and same_kinks(x - e)):
                continue
            n = float(e.norm())
            an.append(float((grad * e).sum()) / n)
            fd.append(float(f(x + e) - f(x - e)) / (2 * n))
    an, fd = np.array(an), np.array(fd)
    return len(an), float(np.linalg.norm(an - fd) / np.linalg.norm(an))


def _directions(n, rng, coords):
    out = []
    for i in coords:
        e = torch.zeros(n, dtype=torch.float64)
        e[i] = H
        out.append(e)
    for _ in range(6):
        u = torch.as_tensor(rng.normal(size=n))
        out.append(H * u / u.norm())
    return out


def check_field_path(dataset, seed):
    """L_r through rendering w.r.t. every field parameter group."""
    ts, batch, rng = small_state(dataset, seed)
    w = LossWeights(1.0, 0.0, 0.0)
    p = ts.field.params.clone().requires_grad_(True)

    def f(q):
        return compute_losses(ts, batch, w, q, ts.adapter.params, ts.delta_phi)[0]

    (g,) = torch.autograd.grad(f(p), p)
    pos = _sample_points(ts, batch, ts.delta_phi)
    base = _pattern(ts.field, ts.field.params, pos)
    coords = np.concatenate([rng.choice(np.arange(a, b), min(4, b - a), replace=False) for a, b, _ in ts.field.layout.offsets.values()])
    dirs = _directions(p.numel(), rng, coords)
    checked, err = _probe(f, g, ts.field.params, dirs, lambda q: torch.equal(_pattern(ts.field, q, pos), base))
    return checked, len(dirs), err


def check_camera_path(dataset, seed):
    """λ_r L_r + λ_p L_reg w.r.t. the preconditioned camera residuals of every view."""
    ts, batch, rng = small_state(dataset, seed)
    w = LossWeights(0.75, 0.0, 0.25)
    dp = ts.delta_phi.clone().requires_grad_(True)

    def f(d):
        l_r, _, l_reg = compute_losses(ts, batch, w, ts.field.params, ts.adapter.params, d)
        return w.lambda_r * l_r + w.lambda_p * l_reg

    (g,) = torch.autograd.grad(f(dp), dp)
    g = g.reshape(-1)
    base = _pattern(ts.field, ts.field.params, _sample_points(ts, batch, ts.delta_phi))
    shape = ts.delta_phi.shape

    def same(x):
        return torch.equal(_pattern(ts.field, ts.field.params, _sample_points(ts, batch, x.reshape(shape))), base)

    used = np.unique(batch.views)
    coords = [v * shape[1] + k for v in used for k in range(shape[1])]
    # the step is H in physical camera parameters, not in whitened residuals
    dirs = []
    for e in _directions(g.numel(), rng, coords):
        moved = torch.einsum("nij,nj->ni", ts.precond, e.reshape(shape))
        dirs.append(e * (H / float(moved.norm())))
    checked, err = _probe(lambda x: f(x.reshape(shape)), g, ts.delta_phi.reshape(-1), dirs, same)
    return checked, len(dirs), err


def check_adapter_path(seed, channels=3, shape=(4, 6)):
    """L_f through the adapter w.r.t. all adapter parameters."""
    ad = init_adapter(channels, seed, torch.float64)
    g_ = torch.Generator().manual_seed(seed)
    params = torch.randn(ad.params.shape, generator=g_, dtype=torch.float64) * 0.4
    rng = np.random.default_rng(seed)
    z = torch.as_tensor(rng.normal(size=shape + (4,)))
    target = torch.as_tensor(rng.normal(size=shape + (4,)))

    def f(q):
        return loss_refinement(adapter_forward_torch(q, channels, z), target)

    p = params.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(p), p)
    dirs = _directions(p.numel(), rng, range(p.numel()))
    checked, err = _probe(f, g, params, dirs, lambda q: True)
    return checked, len(dirs), err
