"""Noise schedules, guidance, DDIM stepping and denoiser backends.

``beta[t]`` is the cumulative signal coefficient: ``beta[0] = 1`` and it
decreases strictly to ``beta[T] > 0``.  With that reading the noising and
DDIM update are

    z_t      = sqrt(beta_t) z + sqrt(1 - beta_t) eps
    z_{prev} = sqrt(beta_prev) (z_t - sqrt(1 - beta_t) eps_hat) / sqrt(beta_t)
               + sqrt(1 - beta_prev) eps_hat
"""

from __future__ import annotations

import math
import struct
import subprocess
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import tensorio
from .errors import ConfigError, ValidationError


class _Null:
    def __init__(self, name):
        self._name = name

    def __repr__(self):
        return self._name

    def __reduce__(self):
        return self._name


NULL_IMAGE = _Null("NULL_IMAGE")
NULL_TEXT = _Null("NULL_TEXT")


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    t_min: float = 0.02
    t_max: float = 0.98
    delta_t: float = 0.75
    kind: str = "scaled_linear"

    @property
    def num_steps(self) -> int:
        return len(self.beta) - 1

    def index(self, t_frac: float) -> int:
        return int(round(t_frac * self.num_steps))


@dataclass(frozen=True)
class GuidanceConfig:
    s_image: float = 1.5
    s_text: float = 7.5

    def __post_init__(self):
        if not (math.isfinite(self.s_image) and math.isfinite(self.s_text)):
            raise ValidationError("guidance scales must be finite")


def make_schedule(T: int = 1000, kind: str = "scaled_linear", t_min: float = 0.02, t_max: float = 0.98, delta_t: float = 0.75) -> NoiseSchedule:
    if T < 2:
        raise ConfigError("schedule needs T >= 2")
    if not 0 < t_min < t_max < 1:
        raise ConfigError(f"need 0 < t_min < t_max < 1, got [{t_min}, {t_max}]")
    if not 0 < delta_t < 1:
        raise ConfigError(f"delta_t must lie in (0, 1), got {delta_t}")
    if kind == "scaled_linear":
        betas = np.linspace(math.sqrt(0.00085), math.sqrt(0.012), T) ** 2
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.minimum(1 - f[1:] / f[:-1], 0.999)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    beta = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(beta=beta, t_min=t_min, t_max=t_max, delta_t=delta_t, kind=kind)


def _data(z):
    return np.asarray(getattr(z, "data", z), dtype=np.float64)


def noise_at(z, t: int, sched: NoiseSchedule, rng):
    z = _data(z)
    eps = rng.standard_normal(z.shape)
    b = sched.beta[t]
    return math.sqrt(b) * z + math.sqrt(1.0 - b) * eps, eps


def add_noise(z, t_frac: float, sched: NoiseSchedule, seed):
    """Noise ``z`` to schedule index ``round(t_frac * T)``; returns ``(z_t, eps)``."""
    return noise_at(z, sched.index(t_frac), sched, np.random.default_rng(seed))


class Denoiser(Protocol):
    def __call__(self, z_t: np.ndarray, t: int, image_cond, text_cond) -> np.ndarray: ...


def guided_score(d: Denoiser, z_t, t: int, image_cond, text_cond, g: GuidanceConfig) -> np.ndarray:
    """Two-scale classifier-free guidance from three denoiser calls."""
    e_uncond = np.asarray(d(z_t, t, NULL_IMAGE, NULL_TEXT), dtype=np.float64)
    e_image = np.asarray(d(z_t, t, image_cond, NULL_TEXT), dtype=np.float64)
    e_full = np.asarray(d(z_t, t, image_cond, text_cond), dtype=np.float64)
    return e_uncond + g.s_image * (e_image - e_uncond) + g.s_text * (e_full - e_image)


def ddim_update(z_t, eps, beta_t: float, beta_prev: float) -> np.ndarray:
    z_t = np.asarray(z_t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    x0 = (z_t - math.sqrt(1.0 - beta_t) * eps) / math.sqrt(beta_t)
    return math.sqrt(beta_prev) * x0 + math.sqrt(1.0 - beta_prev) * eps


def ddim_step(z_t, eps_pred, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    if not 0 <= t_prev <= t:
        raise ValidationError(f"need 0 <= t_prev <= t, got t={t}, t_prev={t_prev}")
    return ddim_update(z_t, eps_pred, sched.beta[t], sched.beta[t_prev])


def ddim_timesteps(t: int, n_steps: int) -> list:
    """Descending indices from ``t`` to 0 in (at most) ``n_steps`` uniform strides."""
    ts = np.unique(np.round(np.linspace(t, 0, n_steps + 1)).astype(int))[::-1]
    return [int(x) for x in ts]


def denoise_edit(d: Denoiser, z, image_cond, text_cond, g: GuidanceConfig, sched: NoiseSchedule, n_steps: int = 20, seed=0) -> np.ndarray:
    """Noise ``z`` to a random level in ``[t_min, t_max]`` and run guided DDIM back to 0."""
    if n_steps < 1:
        raise ValidationError("n_steps must be >= 1")
    rng = np.random.default_rng(seed)
    t = sched.index(rng.uniform(sched.t_min, sched.t_max))
    z0 = _data(z)
    zt, eps = noise_at(z0, t, sched, rng)
    record = getattr(d, "record_noise", None)
    if record is not None:
        record(z0, eps, t)
    steps = ddim_timesteps(t, n_steps)
    for a, b in zip(steps[:-1], steps[1:]):
        eps_hat = guided_score(d, zt, a, image_cond, text_cond, g)
        zt = ddim_step(zt, eps_hat, a, b, sched)
    return zt


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------


class OracleEditDenoiser:
    """Test backend with a known edit region and direction.

    Text-free calls return the noise that maps ``z_t`` back to a clean
    reference: the image condition when one is given, otherwise the latent
    handed over through ``record_noise``.  At the injected noise level this
    is exactly the ``eps`` drawn by ``add_noise``.  Text-conditioned calls
    subtract ``magnitude * direction`` inside the region, so
    ``cond - uncond == magnitude * direction`` there and 0 elsewhere.

    ``region`` is an ``(H, W)`` boolean map, a ``{view_id: map}`` dict keyed by
    the image condition's ``view_id``, or None for "no region".
    """

    def __init__(self, region=None, direction=(1.0, 0.0, 0.0, 0.0), magnitude: float = 1.0, schedule: NoiseSchedule | None = None):
        d = np.asarray(direction, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValidationError("oracle direction must be unit length")
        self.region = region
        self.direction = d
        self.magnitude = float(magnitude)
        self.schedule = schedule or make_schedule()
        self._clean = None

    def record_noise(self, z_clean, eps, t):
        self._clean = np.asarray(z_clean, dtype=np.float64).copy()

    def region_for(self, image_cond, shape):
        reg = self.region
        if isinstance(reg, dict):
            reg = reg.get(getattr(image_cond, "view_id", None))
        if reg is None:
            return np.zeros(shape[:2], dtype=bool)
        return np.asarray(reg, dtype=bool)

    def __call__(self, z_t, t, image_cond, text_cond):
        z_t = np.asarray(z_t, dtype=np.float64)
        if image_cond is not NULL_IMAGE:
            ref = _data(image_cond)
        elif self._clean is not None:
            ref = self._clean
        else:
            ref = np.zeros_like(z_t)
        b = self.schedule.beta[t]
        if b >= 1.0:
            eps = np.zeros_like(z_t)
        else:
            eps = (z_t - math.sqrt(b) * ref) / math.sqrt(1.0 - b)
        if text_cond is not NULL_TEXT and self.magnitude != 0.0:
            mask = self.region_for(image_cond, z_t.shape)
            eps = eps - self.magnitude * mask[..., None] * self.direction
        return eps


def IdentityDenoiser(schedule: NoiseSchedule | None = None) -> OracleEditDenoiser:
    """Recorded-noise backend with no edit; conditional and unconditional calls agree."""
    return OracleEditDenoiser(None, magnitude=0.0, schedule=schedule)


def oracle_edit_denoiser(region, direction, magnitude: float, schedule: NoiseSchedule | None = None) -> OracleEditDenoiser:
    return OracleEditDenoiser(region, direction, magnitude, schedule)


# external subprocess protocol -----------------------------------------------
#
# request:  b"DNQ1" | tensor(z_t) | u32 t | u8 has_image | [tensor(image)]
#           | i32 text_len (-1 = NULL_TEXT) | utf-8 text
# response: tensor(eps)

_REQ = b"DNQ1"


def encode_request(z_t, t, image_cond, text_cond) -> bytes:
    parts = [_REQ, tensorio.pack_tensor(np.asarray(z_t, dtype=np.float32)), struct.pack("<I", int(t))]
    if image_cond is NULL_IMAGE:
        parts.append(b"\x00")
    else:
        parts += [b"\x01", tensorio.pack_tensor(_data(image_cond).astype(np.float32))]
    if text_cond is NULL_TEXT:
        parts.append(struct.pack("<i", -1))
    else:
        raw = str(text_cond).encode("utf-8")
        parts += [struct.pack("<i", len(raw)), raw]
    return b"".join(parts)


def _read_exact(stream, n):
    buf = stream.read(n)
    if len(buf) != n:
        raise EOFError("denoiser stream closed")
    return buf


def _decode_body(stream):
    z_t = tensorio.read_tensor_from(stream)
    (t,) = struct.unpack("<I", _read_exact(stream, 4))
    image = tensorio.read_tensor_from(stream) if _read_exact(stream, 1) == b"\x01" else NULL_IMAGE
    (n,) = struct.unpack("<i", _read_exact(stream, 4))
    text = NULL_TEXT if n < 0 else _read_exact(stream, n).decode("utf-8")
    return z_t, t, image, text


def decode_request(stream):
    """Parse one request from a binary stream; returns ``(z_t, t, image_cond, text_cond)``."""
    if _read_exact(stream, 4) != _REQ:
        raise ValidationError("bad denoiser request magic")
    return _decode_body(stream)


def serve_denoiser(fn, stdin, stdout):
    """Answer requests on binary streams with ``fn`` until EOF (server side of the protocol)."""
    while True:
        head = stdin.read(4)
        if not head:
            return
        if head != _REQ:
            raise ValidationError("bad denoiser request magic")
        eps = np.asarray(fn(*_decode_body(stdin)), dtype=np.float32)
        stdout.write(tensorio.pack_tensor(eps))
        stdout.flush()


class ExternalDenoiser:
    """Denoiser served by a subprocess speaking the binary request protocol."""

    def __init__(self, command):
        self.command = list(command)
        self._proc = None

    def _ensure(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        return self._proc

    def __call__(self, z_t, t, image_cond, text_cond):
        proc = self._ensure()
        proc.stdin.write(encode_request(z_t, t, image_cond, text_cond))
        proc.stdin.flush()
        return tensorio.read_tensor_from(proc.stdout).astype(np.float64)

    def close(self):
        if self._proc is not None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)
            self._proc = None


BACKENDS = ("oracle_edit", "identity", "external")


def make_backend(name: str, **kwargs):
    if name == "oracle_edit":
        return OracleEditDenoiser(**kwargs)
    if name == "identity":
        return IdentityDenoiser(kwargs.get("schedule"))
    if name == "external":
        return ExternalDenoiser(kwargs["command"])
    raise ConfigError(f"unknown denoiser backend {name!r}; choose from {BACKENDS}")
