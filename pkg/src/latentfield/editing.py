"""Iterative dataset-update editing with masked blending, plus edit metrics."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .delta import delta_scores, threshold_mask, write_pgm
from .diffusion import GuidanceConfig, NoiseSchedule, denoise_edit
from .errors import NonFiniteError, UndefinedResultError, ValidationError
from .render import RenderConfig, render_view
from .scene import LatentImage, SceneDataset
from .training import LossWeights, Phase, TrainState, make_batch, save_checkpoint, step_rng, train_step, weights_at

log = logging.getLogger(__name__)

# edit-phase weights: adapter refresh first, then reconstruction only; cameras stay fixed
EDIT_WARMUP_STEPS = 400
EDIT_WARMUP_WEIGHTS = LossWeights(0.90, 0.10, 0.0)
EDIT_MAIN_WEIGHTS = LossWeights(1.0, 0.0, 0.0)


def default_edit_phases(iterations: int, warmup: int = EDIT_WARMUP_STEPS, first=EDIT_WARMUP_WEIGHTS, rest=EDIT_MAIN_WEIGHTS) -> list:
    if iterations <= warmup:
        return [Phase(0, iterations, first)]
    return [Phase(0, warmup, first), Phase(warmup, iterations, rest)]


@dataclass
class EditConfig:
    editing_rate: int = 10
    mask_threshold: float = 0.45
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    edit_iterations: int = 2000
    phase_schedule: list | None = None
    refresh_mask_each_edit: bool = True
    ddim_steps: int = 20
    render_samples: int | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.editing_rate < 1:
            raise ValidationError("editing_rate must be >= 1")
        if self.edit_iterations < 1:
            raise ValidationError("edit_iterations must be >= 1")
        if self.phase_schedule is None:
            self.phase_schedule = default_edit_phases(self.edit_iterations)
        pos = 0
        for ph in self.phase_schedule:
            if ph.start != pos or ph.end <= ph.start:
                raise ValidationError("phase ranges must partition [0, edit_iterations)")
            pos = ph.end
        if pos != self.edit_iterations:
            raise ValidationError("phase ranges must partition [0, edit_iterations)")

    def phase_index(self, i: int) -> int:
        for k, ph in enumerate(self.phase_schedule):
            if ph.start <= i < ph.end:
                return k
        raise ValidationError(f"iteration {i} outside the phase schedule")


@dataclass
class EditSession:
    """Model plus the working dataset ``Z -> Z_e``; ``originals`` is never mutated."""

    state: TrainState
    dataset: SceneDataset
    originals: list = field(default_factory=list)
    masks: dict = field(default_factory=dict)
    step: int = 0
    du_count: int = 0
    log_records: list = field(default_factory=list)

    def __post_init__(self):
        if not self.originals:
            self.originals = [LatentImage(z.data.copy(), z.view_id) for z in self.dataset.latents]

    @property
    def field(self):
        return self.state.field

    @property
    def adapter(self):
        return self.state.adapter

    @classmethod
    def start(cls, state: TrainState, dataset: SceneDataset) -> "EditSession":
        return cls(state=state, dataset=dataset.copy())


def blend_masked(edited, original, mask) -> LatentImage:
    """Take ``edited`` where the mask is set and ``original`` elsewhere.

    For a binary mask this is ``edited * M + (1 - M) * original``, evaluated
    as a selection so unmasked pixels keep their exact bits.
    """
    e = np.asarray(getattr(edited, "data", edited))
    o = np.asarray(getattr(original, "data", original))
    m = np.asarray(getattr(mask, "data", mask)).astype(bool)
    if e.shape != o.shape or m.shape != o.shape[:2]:
        raise ValidationError(f"blend shapes differ: edited {e.shape}, original {o.shape}, mask {m.shape}")
    out = np.where(m[..., None], e.astype(o.dtype), o)
    return LatentImage(out, getattr(original, "view_id", 0))


_SUBJECT_VERB = re.compile(r"^\s*(\w+)\s+(.*)$")


def split_prompt(prompt: str) -> list:
    """Split a multi-attribute instruction on the word "and".

    A clause with no verb of its own (it starts with a determiner or
    possessive, as in "... and his shoes blue") borrows the first clause's
    leading verb.
    """
    if not prompt or not prompt.strip():
        raise ValidationError("empty prompt")
    parts = [p.strip() for p in re.split(r"\s+and\s+", prompt.strip()) if p.strip()]
    if not parts:
        raise ValidationError("empty prompt")
    lead = _SUBJECT_VERB.match(parts[0])
    verb = lead.group(1) if lead else ""
    out = [parts[0]]
    for p in parts[1:]:
        first = p.split()[0].lower()
        if verb and first in _DETERMINERS:
            p = f"{verb} {p}"
        out.append(p)
    return out


_DETERMINERS = {"the", "a", "an", "his", "her", "its", "their", "my", "our", "your", "this", "that"}


def _as_list(denoisers, n):
    if isinstance(denoisers, (list, tuple)):
        if len(denoisers) != n:
            raise ValidationError(f"{n} prompts but {len(denoisers)} denoisers")
        return list(denoisers)
    return [denoisers] * n


def dataset_update(session: EditSession, view: int, prompts, denoisers, cfg: EditConfig, sched: NoiseSchedule, seed, i: int, mask_dir=None) -> dict:
    """Replace one dataset latent with its masked edit; returns log fields."""
    ts = session.state
    samples = cfg.render_samples or ts.config.render.samples_per_ray
    cam = ts.current_cameras()[view]
    render = render_view(ts.field, ts.adapter, cam, RenderConfig(samples_per_ray=samples), ts.latent_shape, ts.near, ts.far, ts.downscale, view)
    original = session.originals[view]
    result = original
    union = np.zeros(original.shape[:2], dtype=np.int64)
    for j, (prompt, d) in enumerate(zip(prompts, denoisers)):
        key = (view, j)
        if cfg.refresh_mask_each_edit or key not in session.masks:
            scores = delta_scores(d, original, original, prompt, sched, seed=[seed, i, j, 0])
            session.masks[key] = threshold_mask(scores, cfg.mask_threshold)
        mask = session.masks[key]
        if mask_dir is not None:
            write_pgm(mask, Path(mask_dir) / f"du{session.du_count:05d}_view{view:03d}_p{j}.pgm")
        union += mask.data
        if mask.data.any():
            edited = denoise_edit(d, render, original, prompt, cfg.guidance, sched, cfg.ddim_steps, seed=[seed, i, j, 1])
            result = blend_masked(edited, result, mask)
    covered = int((union > 0).sum())
    session.dataset.latents[view] = LatentImage(result.data, view)
    session.du_count += 1
    return {
        "du_view": view,
        "mask_area_frac": covered / union.size,
        "overlap_frac": 0.0 if covered == 0 else int((union > 1).sum()) / covered,
    }


def edit_scene(
    session: EditSession,
    prompts,
    denoisers,
    cfg: EditConfig,
    sched: NoiseSchedule,
    seed=0,
    log_path=None,
    mask_dir=None,
    checkpoint_dir=None,
    callback=None,
) -> EditSession:
    """Run ``cfg.edit_iterations`` training steps with a dataset update every ``editing_rate`` steps.

    Views are updated round-robin.  Every iteration appends one record to
    ``session.log_records`` (and to ``log_path`` as JSON lines).
    """
    if isinstance(prompts, str):
        prompts = [prompts]
    prompts = list(prompts)
    if not prompts:
        raise ValidationError("at least one prompt is required")
    dens = _as_list(denoisers, len(prompts))
    if mask_dir is not None:
        Path(mask_dir).mkdir(parents=True, exist_ok=True)
    sink = open(log_path, "a") if log_path is not None else None
    ts = session.state
    try:
        for i in range(cfg.edit_iterations):
            rec = {"du_view": None, "mask_area_frac": None, "overlap_frac": None}
            if i % cfg.editing_rate == 0:
                view = session.du_count % session.dataset.n_views
                rec.update(dataset_update(session, view, prompts, dens, cfg, sched, seed, i, mask_dir))
            w = weights_at(cfg.phase_schedule, i)
            rng = step_rng(seed, ts.step)
            batch = make_batch(ts, session.dataset, w, rng, ts.step)
            try:
                rep = train_step(ts, batch, w, rng)
            except NonFiniteError as exc:
                exc.snapshot = {**(exc.snapshot or {}), "edit_step": i, "du_count": session.du_count}
                raise
            record = {
                "step": i,
                "phase": cfg.phase_index(i),
                "loss_r": rep.loss_r,
                "loss_f": rep.loss_f,
                "loss_reg": rep.loss_reg,
                **rec,
            }
            session.log_records.append(record)
            if sink is not None:
                sink.write(json.dumps(record) + "\n")
            session.step = i + 1
            if checkpoint_dir is not None and cfg.checkpoint_every and session.step % cfg.checkpoint_every == 0:
                save_checkpoint(ts, Path(checkpoint_dir) / f"step_{session.step:06d}")
            if callback is not None:
                callback(record)
    finally:
        if sink is not None:
            sink.close()
    return session


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

PSNR_CAP = 99.0


def edit_psnr(a, b, region=None, peak: float = 1.0) -> float:
    """PSNR in dB over the pixels selected by ``region`` (all pixels if None).

    Identical inputs report the capped value 99.0.
    """
    x = np.asarray(getattr(a, "data", a), dtype=np.float64)
    y = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"shape mismatch {x.shape} vs {y.shape}")
    if region is not None:
        sel = np.asarray(getattr(region, "data", region)).astype(bool)
        if sel.shape != x.shape[:2]:
            raise ValidationError("region must match the latent grid")
        x, y = x[sel], y[sel]
    if x.size == 0:
        raise ValidationError("empty pixel selection")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def displacement_cosine(before, after, direction, region) -> float:
    """Cosine between the summed inside-region change and ``direction``."""
    sel = np.asarray(getattr(region, "data", region)).astype(bool)
    diff = np.asarray(getattr(after, "data", after), dtype=np.float64) - np.asarray(getattr(before, "data", before), dtype=np.float64)
    v = diff[sel].sum(0)
    d = np.asarray(direction, dtype=np.float64)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        raise UndefinedResultError("no displacement inside the region")
    return float(v @ d / (nv * np.linalg.norm(d)))


class RandomProjectionEmbedder:
    """Seeded stand-in for an image/text embedding model.

    Images are summarised by 4x4 average-pooled channels and projected with a
    fixed Gaussian matrix; text is a sum of per-token hashed Gaussian vectors.
    Outputs are unit vectors with no semantic meaning.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._proj = np.random.default_rng([seed, 0]).standard_normal((64, dim))

    def _token(self, tok: str) -> np.ndarray:
        h = int.from_bytes(hashlib.sha256(tok.encode("utf-8")).digest()[:8], "little")
        return np.random.default_rng([self.seed, 1, h]).standard_normal(self.dim)

    def __call__(self, x) -> np.ndarray:
        if isinstance(x, str):
            toks = x.lower().split() or [""]
            v = np.sum([self._token(t) for t in toks], axis=0)
        else:
            data = np.asarray(getattr(x, "data", x), dtype=np.float64)
            h, w = data.shape[:2]
            rows = np.array_split(np.arange(h), 4)
            cols = np.array_split(np.arange(w), 4)
            feat = np.array([data[np.ix_(r, c)].mean((0, 1)) for r in rows for c in cols]).reshape(-1)
            v = feat @ self._proj
        n = np.linalg.norm(v)
        return v / n if n > 0 else v


def directional_similarity(embedder, before, after, prompt_before: str, prompt_after: str) -> float:
    di = np.asarray(embedder(after), dtype=np.float64) - np.asarray(embedder(before), dtype=np.float64)
    dt = np.asarray(embedder(prompt_after), dtype=np.float64) - np.asarray(embedder(prompt_before), dtype=np.float64)
    ni, nt = np.linalg.norm(di), np.linalg.norm(dt)
    if ni < 1e-12 or nt < 1e-12:
        raise UndefinedResultError("embedding difference has zero norm")
    return float(np.clip(di @ dt / (ni * nt), -1.0, 1.0))
