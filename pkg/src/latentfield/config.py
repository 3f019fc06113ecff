"""Run configuration: one flat namespaced JSON document with documented defaults.

Every default records where it comes from.  ``source`` values:
``method`` for the published hyperparameters, ``decision`` for choices made
here (see the README's defaults table).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class Default:
    value: object
    source: str
    note: str


DEFAULTS: dict = {
    "schedule.T": Default(1000, "decision", "standard latent-diffusion horizon"),
    "schedule.kind": Default("scaled_linear", "decision", "cumulative product of the scaled-linear alpha sequence"),
    "schedule.t_min": Default(0.02, "method", "lower end of the random noise level range"),
    "schedule.t_max": Default(0.98, "method", "upper end of the random noise level range"),
    "schedule.delta_t": Default(0.75, "method", "noise level for delta scores"),
    "guidance.s_image": Default(1.5, "method", "image guidance scale"),
    "guidance.s_text": Default(7.5, "method", "text guidance scale"),
    "edit.editing_rate": Default(10, "method", "training steps between dataset updates"),
    "edit.mu": Default(0.45, "method", "delta-score mask threshold"),
    "edit.iterations": Default(2000, "method", "editing iterations (low end of the published range)"),
    "edit.warmup_steps": Default(400, "method", "length of the first editing phase"),
    "edit.warmup_weights": Default([0.90, 0.10, 0.0], "method", "(lambda_r, lambda_f, lambda_p) in the first editing phase"),
    "edit.main_weights": Default([1.0, 0.0, 0.0], "method", "(lambda_r, lambda_f, lambda_p) afterwards"),
    "edit.refresh_mask": Default(True, "decision", "recompute masks at every dataset update"),
    "edit.ddim_steps": Default(20, "decision", "uniform DDIM strides per edit"),
    "edit.checkpoint_every": Default(0, "decision", "0 disables periodic checkpoints"),
    "edit.prompt": Default("make the roof red", "decision", "instruction used when none is given"),
    "init.steps": Default(2000, "decision", "desk-scale initialisation length"),
    "init.reference_steps": Default(30000, "method", "published initialisation length"),
    "init.warmup_reference": Default(2500, "method", "published first-phase length; scaled by steps/reference_steps"),
    "init.warmup_weights": Default([0.80, 0.10, 0.10], "method", "(lambda_r, lambda_f, lambda_p) in the first phase"),
    "init.main_weights": Default([0.75, 0.0, 0.25], "method", "(lambda_r, lambda_f, lambda_p) afterwards"),
    "init.no_adapter": Default(False, "decision", "ablation: force lambda_f = 0"),
    "train.rays_per_batch": Default(1024, "method", "rays per random batch"),
    "train.lr_field": Default(1e-3, "decision", "Adam step size for the field"),
    "train.lr_adapter": Default(1e-3, "decision", "Adam step size for the adapter"),
    "train.lr_camera": Default(1e-4, "decision", "Adam step size for camera residuals"),
    "train.samples_per_ray": Default(32, "decision", "quadrature samples during training and rendering"),
    "adapter.channels": Default(256, "method", "about 0.28M adapter parameters"),
    "scene.spec": Default("box", "decision", "synthetic scene generator"),
    "scene.views": Default(8, "decision", "number of synthetic views"),
    "scene.height": Default(48, "decision", "latent rows"),
    "scene.width": Default(48, "decision", "latent columns"),
    "backend.name": Default("oracle_edit", "decision", "denoiser backend"),
    "backend.magnitude": Default(1.0, "decision", "oracle edit strength"),
    "backend.direction": Default([0.0, 0.0, 0.0, 1.0], "decision", "oracle edit direction (unit 4-vector)"),
    "backend.region_tag": Default(1, "decision", "scene label that the oracle edits"),
    "backend.command": Default([], "decision", "argv for the external backend"),
    "seed": Default(0, "decision", "global seed"),
}


class RunConfig:
    """Flat mapping from dotted keys to values; unknown keys are rejected."""

    def __init__(self, values: dict | None = None):
        self._values = {k: _copy(d.value) for k, d in DEFAULTS.items()}
        if values:
            self.update(values)

    def update(self, values: dict):
        for key, val in values.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self._values[key] = _check(key, val)

    def __getitem__(self, key):
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def as_dict(self) -> dict:
        return {k: _copy(v) for k, v in self._values.items()}

    def dumps(self) -> str:
        return json.dumps(self._values, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        try:
            raw = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {p} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls(raw)


def _copy(v):
    return list(v) if isinstance(v, list) else v


def _check(key, val):
    ref = DEFAULTS[key].value
    if isinstance(ref, bool):
        ok = isinstance(val, bool)
    elif isinstance(ref, int):
        ok = isinstance(val, int) and not isinstance(val, bool)
    elif isinstance(ref, float):
        ok = isinstance(val, (int, float)) and not isinstance(val, bool)
        val = float(val) if ok else val
    elif isinstance(ref, str):
        ok = isinstance(val, str)
    elif isinstance(ref, list):
        ok = isinstance(val, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"config key {key!r} expects {type(ref).__name__}, got {val!r}")
    return val


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _weights(vals):
    from .training import LossWeights

    if len(vals) != 3:
        raise ConfigError(f"loss weights need three entries, got {vals!r}")
    try:
        return LossWeights(*map(float, vals))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_schedule(cfg: RunConfig):
    from .diffusion import make_schedule

    return make_schedule(cfg["schedule.T"], cfg["schedule.kind"], cfg["schedule.t_min"], cfg["schedule.t_max"], cfg["schedule.delta_t"])


def build_guidance(cfg: RunConfig):
    from .diffusion import GuidanceConfig

    try:
        return GuidanceConfig(cfg["guidance.s_image"], cfg["guidance.s_text"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def init_phases(cfg: RunConfig, steps: int | None = None) -> list:
    """Two-phase initialisation schedule, first phase scaled to the run length."""
    from .training import Phase

    steps = cfg["init.steps"] if steps is None else steps
    warm = round(cfg["init.warmup_reference"] / cfg["init.reference_steps"] * steps)
    first = _weights(cfg["init.warmup_weights"])
    rest = _weights(cfg["init.main_weights"])
    if cfg["init.no_adapter"]:
        first = type(first)(first.lambda_r, 0.0, first.lambda_p)
        rest = type(rest)(rest.lambda_r, 0.0, rest.lambda_p)
    if warm <= 0:
        return [Phase(0, steps, rest)]
    return [Phase(0, warm, first), Phase(warm, max(steps, warm + 1), rest)]


def build_edit_config(cfg: RunConfig):
    from .editing import EditConfig, default_edit_phases

    iters = cfg["edit.iterations"]
    phases = default_edit_phases(iters, cfg["edit.warmup_steps"], _weights(cfg["edit.warmup_weights"]), _weights(cfg["edit.main_weights"]))
    try:
        return EditConfig(
            editing_rate=cfg["edit.editing_rate"],
            mask_threshold=cfg["edit.mu"],
            guidance=build_guidance(cfg),
            edit_iterations=iters,
            phase_schedule=phases,
            refresh_mask_each_edit=cfg["edit.refresh_mask"],
            ddim_steps=cfg["edit.ddim_steps"],
            checkpoint_every=cfg["edit.checkpoint_every"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_train_config(cfg: RunConfig):
    from .render import RenderConfig
    from .training import TrainConfig

    return TrainConfig(
        lr_field=cfg["train.lr_field"],
        lr_adapter=cfg["train.lr_adapter"],
        lr_camera=cfg["train.lr_camera"],
        rays_per_batch=cfg["train.rays_per_batch"],
        render=RenderConfig(samples_per_ray=cfg["train.samples_per_ray"], stratified=True),
    )
