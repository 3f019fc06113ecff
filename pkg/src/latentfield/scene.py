"""Multi-view latent datasets, image/latent codecs and synthetic scenes.

A scene directory looks like::

    scene/
      manifest.json
      view_000.lte      # (H', W', 4) float32 latent
      region_000.lte    # optional (H', W') label map, synthetic scenes only

``manifest.json`` holds ``n_views``, ``latent_shape`` and one record per view
with the latent file name and the camera JSON; ``near``/``far`` and
``downscale_factor`` are optional.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .camera import CameraParams, look_at
from .errors import ConfigError, FormatError, ValidationError

LATENT_CHANNELS = 4


@dataclass
class LatentImage:
    data: np.ndarray
    view_id: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[2] != LATENT_CHANNELS:
            raise ValidationError(f"latent must have shape (H, W, 4), got {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValidationError("latent spatial dims must be >= 1")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError(f"latent for view {self.view_id} has non-finite entries")

    @property
    def shape(self):
        return self.data.shape


# ---------------------------------------------------------------------------
# codecs
# ---------------------------------------------------------------------------


class IdentityCodec:
    """RGB -> 4 channels by zero-padding; decode drops the pad channel."""

    downscale_factor = 1

    def encode(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image)
        pad = np.zeros(image.shape[:2] + (1,), dtype=image.dtype)
        return np.concatenate([image, pad], axis=-1)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return np.asarray(latent)[..., :3]


# fixed 3 -> 4 channel lift: RGB passthrough plus luminance
_LIFT = np.array(
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.299, 0.587, 0.114]]
)


class PoolCodec:
    """Average-pool by ``factor`` then lift 3 -> 4 channels; decode is nearest upsampling."""

    def __init__(self, factor: int = 8):
        if factor < 1:
            raise ValidationError("downscale factor must be positive")
        self.downscale_factor = int(factor)
        self._unlift = np.linalg.pinv(_LIFT)

    def encode(self, image: np.ndarray) -> np.ndarray:
        f = self.downscale_factor
        h, w, c = image.shape
        pooled = np.asarray(image, dtype=np.float64).reshape(h // f, f, w // f, f, c).mean(axis=(1, 3))
        return pooled @ _LIFT.T

    def decode(self, latent: np.ndarray) -> np.ndarray:
        f = self.downscale_factor
        rgb = np.asarray(latent, dtype=np.float64) @ self._unlift.T
        return np.repeat(np.repeat(rgb, f, axis=0), f, axis=1)


def encode_views(images, codec) -> list[LatentImage]:
    images = [np.asarray(im) for im in images]
    if not images:
        raise ValidationError("no images to encode")
    shape = images[0].shape
    f = codec.downscale_factor
    for im in images:
        if im.shape != shape or im.ndim != 3 or im.shape[2] != 3:
            raise ValidationError("all images must share one (H, W, 3) shape")
    if shape[0] % f or shape[1] % f:
        raise ValidationError(f"image size {shape[:2]} not divisible by downscale factor {f}")
    return [LatentImage(codec.encode(im).astype(np.float32), view_id=n) for n, im in enumerate(images)]


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


@dataclass
class SceneDataset:
    latents: list
    cameras: list
    region_labels: list | None = None
    near: float = 2.0
    far: float = 4.0
    downscale_factor: int = 1

    def __post_init__(self):
        n = len(self.latents)
        if n != len(self.cameras):
            raise ValidationError(f"{n} latents but {len(self.cameras)} cameras")
        if n < 2:
            raise ValidationError(f"a scene needs at least 2 views, got {n}")
        shape = self.latents[0].shape
        for z in self.latents:
            if z.shape != shape:
                raise ValidationError(f"latent shape mismatch: {z.shape} vs {shape}")
        if self.region_labels is not None:
            if len(self.region_labels) != n:
                raise ValidationError("one region map per view required")
            self.region_labels = [np.asarray(r) for r in self.region_labels]
        if not self.near < self.far:
            raise ValidationError("near must be < far")

    @property
    def n_views(self) -> int:
        return len(self.latents)

    @property
    def latent_shape(self):
        return self.latents[0].shape

    @property
    def ground_truth_edit_region(self):
        if self.region_labels is None:
            return None
        return [(r > 0) for r in self.region_labels]

    def copy(self) -> "SceneDataset":
        return SceneDataset(
            latents=[LatentImage(z.data.copy(), z.view_id) for z in self.latents],
            cameras=list(self.cameras),
            region_labels=None if self.region_labels is None else [r.copy() for r in self.region_labels],
            near=self.near,
            far=self.far,
            downscale_factor=self.downscale_factor,
        )


def write_scene(ds: SceneDataset, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    views = []
    for n, (z, cam) in enumerate(zip(ds.latents, ds.cameras)):
        rec = {"latent_file": f"view_{n:03d}.lte", "camera": cam.to_json()}
        tensorio.write_tensor(root / rec["latent_file"], z.data, np.float32)
        if ds.region_labels is not None:
            rec["edit_region_file"] = f"region_{n:03d}.lte"
            tensorio.write_tensor(root / rec["edit_region_file"], ds.region_labels[n], np.float32)
        views.append(rec)
    manifest = {
        "n_views": ds.n_views,
        "latent_shape": list(ds.latent_shape),
        "near": ds.near,
        "far": ds.far,
        "downscale_factor": ds.downscale_factor,
        "views": views,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_scene(path) -> SceneDataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(mpath.read_text())
        views = manifest["views"]
        n_views = int(manifest["n_views"])
        shape = tuple(manifest["latent_shape"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed manifest: {exc}") from exc
    if len(views) != n_views:
        raise ValidationError(f"manifest declares {n_views} views but lists {len(views)}")
    latents, cameras, regions = [], [], []
    for n, rec in enumerate(views):
        if "latent_file" not in rec or "camera" not in rec:
            raise FormatError(f"view {n} record lacks latent_file/camera")
        data = tensorio.read_tensor(root / rec["latent_file"])
        if data.shape != shape:
            raise ValidationError(f"view {n} latent shape {data.shape} != manifest {shape}")
        latents.append(LatentImage(data, view_id=n))
        cameras.append(CameraParams.from_json(rec["camera"]))
        if "edit_region_file" in rec:
            regions.append(tensorio.read_tensor(root / rec["edit_region_file"]).astype(np.int64))
    if regions and len(regions) != n_views:
        raise ValidationError("edit regions present for only some views")
    return SceneDataset(
        latents=latents,
        cameras=cameras,
        region_labels=regions or None,
        near=float(manifest.get("near", 2.0)),
        far=float(manifest.get("far", 4.0)),
        downscale_factor=int(manifest.get("downscale_factor", 1)),
    )


# ---------------------------------------------------------------------------
# analytic volumes and synthetic scenes
# ---------------------------------------------------------------------------


@dataclass
class Block:
    lo: np.ndarray
    hi: np.ndarray
    sigma: float
    latent: np.ndarray
    tag: int = 0


@dataclass
class AnalyticVolume:
    """Disjoint axis-aligned blocks of constant density and latent colour.

    Rays through such a volume integrate in closed form, which makes this the
    ground truth for synthetic scenes.
    """

    blocks: list
    background: np.ndarray = field(default_factory=lambda: np.zeros(LATENT_CHANNELS))

    def _intervals(self, origins, dirs, near, far):
        n = len(origins)
        t0 = np.full((n, len(self.blocks)), np.inf)
        t1 = np.full((n, len(self.blocks)), np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            for j, b in enumerate(self.blocks):
                a = (b.lo - origins) * inv
                c = (b.hi - origins) * inv
                lo = np.nanmax(np.minimum(a, c), axis=1)
                hi = np.nanmin(np.maximum(a, c), axis=1)
                lo = np.maximum(lo, near)
                hi = np.minimum(hi, far)
                hit = hi > lo
                t0[hit, j] = lo[hit]
                t1[hit, j] = hi[hit]
        return t0, t1

    def integrate(self, origins, dirs, near, far):
        """Exact render of rays.

        Returns ``(latent (n, 4), tag_weights {tag: (n,)}, depth (n,))`` where
        depth is the expected termination distance (NaN when nothing is hit).
        """
        origins = np.asarray(origins, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64)
        t0, t1 = self._intervals(origins, dirs, near, far)
        hit = np.isfinite(t0)
        length = np.where(hit, np.where(hit, t1, 0.0) - np.where(hit, t0, 0.0), 0.0)
        sig = np.array([b.sigma for b in self.blocks])
        tau = length * sig
        # blocks are disjoint, so interval order along the ray is order of t0
        before = (t0[:, None, :] < t0[:, :, None]) & np.isfinite(t0[:, None, :])
        prior = (before * tau[:, None, :]).sum(-1)
        trans = np.exp(-prior)
        alpha = 1.0 - np.exp(-tau)
        w = trans * alpha
        lat = np.stack([b.latent for b in self.blocks])
        out = w @ lat + (1.0 - w.sum(1, keepdims=True)) * self.background
        tags = {}
        for j, b in enumerate(self.blocks):
            tags[b.tag] = tags.get(b.tag, 0.0) + w[:, j]
        a = np.where(np.isfinite(t0), t0, 0.0)
        e = np.exp(-tau)
        with np.errstate(divide="ignore", invalid="ignore"):
            seg = trans * (a - np.where(np.isfinite(t1), t1, 0.0) * e + np.where(sig > 0, alpha / sig, 0.0))
        wsum = w.sum(1)
        depth = np.where(wsum > 1e-9, seg.sum(1) / np.maximum(wsum, 1e-300), np.nan)
        return out, tags, depth


@dataclass
class SceneSpec:
    name: str = "box"
    n_views: int = 8
    height: int = 48
    width: int = 48
    sigma: float = 40.0
    radius: float = 3.0
    elevation_deg: float = 25.0
    focal_scale: float = 1.1
    camera_noise: float = 0.0
    downscale_factor: int = 1


_BOX_COLORS = {
    "left": np.array([0.80, 0.20, 0.15, 0.50]),
    "right": np.array([0.30, 0.70, 0.40, 0.20]),
    "top": np.array([0.25, 0.35, 0.90, 0.60]),
    "front": np.array([0.65, 0.55, 0.20, 0.85]),
}


def synth_volume(spec: SceneSpec) -> AnalyticVolume:
    s = spec.sigma
    if spec.name == "box":
        blocks = [
            Block(np.array([-0.5, -0.5, -0.5]), np.array([0.0, 0.5, 0.2]), s, _BOX_COLORS["left"]),
            Block(np.array([0.0, -0.5, -0.5]), np.array([0.5, 0.5, 0.2]), s, _BOX_COLORS["right"]),
            Block(np.array([-0.5, -0.5, 0.2]), np.array([0.5, 0.5, 0.5]), s, _BOX_COLORS["top"], tag=1),
        ]
    elif spec.name == "box2":
        blocks = [
            Block(np.array([-0.5, -0.5, -0.5]), np.array([0.0, 0.25, 0.2]), s, _BOX_COLORS["left"]),
            Block(np.array([0.0, -0.5, -0.5]), np.array([0.5, 0.25, 0.2]), s, _BOX_COLORS["right"]),
            Block(np.array([-0.5, -0.5, 0.2]), np.array([0.5, 0.5, 0.5]), s, _BOX_COLORS["top"], tag=1),
            Block(np.array([-0.5, 0.25, -0.5]), np.array([0.5, 0.5, 0.2]), s, _BOX_COLORS["front"], tag=2),
        ]
    else:
        raise ConfigError(f"unknown scene spec {spec.name!r}")
    return AnalyticVolume(blocks)


def ring_cameras(spec: SceneSpec, seed: int) -> list[CameraParams]:
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * math.pi / spec.n_views)
    el = math.radians(spec.elevation_deg)
    f = spec.downscale_factor
    cams = []
    for k in range(spec.n_views):
        az = phase + 2 * math.pi * k / spec.n_views
        eye = spec.radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(
            CameraParams(
                rotation=look_at(eye),
                translation=eye,
                focal=np.full(2, spec.focal_scale * spec.width * f),
                principal=np.array([spec.width * f / 2.0, spec.height * f / 2.0]),
            )
        )
    return cams


def camera_rays_np(camera: CameraParams, height: int, width: int, downscale: int = 1):
    """Rays for every latent pixel in row-major order (numpy, initial estimate)."""
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    f = camera.focal / downscale
    c = camera.principal / downscale
    d = np.stack([(cols + 0.5 - c[0]) / f[0], (rows + 0.5 - c[1]) / f[1], np.ones((height, width))], -1)
    d = d.reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    dirs = d @ camera.rotation.T
    return np.broadcast_to(camera.translation, dirs.shape).copy(), dirs


def scene_bounds(spec: SceneSpec):
    return (spec.radius - 1.0, spec.radius + 1.0)


def synth_scene(spec: SceneSpec, seed: int = 0) -> SceneDataset:
    """Render an analytic volume from a ring of cameras.

    Latents are exact closed-form renders.  ``region_labels`` marks, per
    pixel, which tagged block carries at least half of the pixel's weight.
    With ``camera_noise > 0`` the stored cameras are perturbed initial
    estimates while the latents come from the true cameras.
    """
    if spec.n_views < 2:
        raise ValidationError(f"a scene needs at least 2 views, got {spec.n_views}")
    volume = synth_volume(spec)
    cams = ring_cameras(spec, seed)
    near, far = scene_bounds(spec)
    latents, labels, stored = [], [], []
    rng = np.random.default_rng([seed, 1])
    for n, cam in enumerate(cams):
        o, d = camera_rays_np(cam, spec.height, spec.width, spec.downscale_factor)
        lat, tags, _ = volume.integrate(o, d, near, far)
        latents.append(LatentImage(lat.reshape(spec.height, spec.width, 4).astype(np.float32), view_id=n))
        lab = np.zeros(spec.height * spec.width, dtype=np.int64)
        for tag, w in sorted(tags.items()):
            if tag > 0:
                lab[w >= 0.5] = tag
        labels.append(lab.reshape(spec.height, spec.width))
        if spec.camera_noise > 0:
            noise = rng.normal(0.0, spec.camera_noise, 3)
            cam = CameraParams(
                rotation=cam.rotation,
                translation=cam.translation + noise,
                focal=cam.focal,
                principal=cam.principal,
            )
        stored.append(cam)
    return SceneDataset(
        latents=latents,
        cameras=stored,
        region_labels=labels,
        near=near,
        far=far,
        downscale_factor=spec.downscale_factor,
    )
