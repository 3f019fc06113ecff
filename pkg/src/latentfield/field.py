"""Latent radiance field: positional encoding and the density/latent MLP."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError
from .params import ParamLayout


def positional_encode(p, bands: int):
    """``[p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p)]``.

    Works on numpy arrays or torch tensors with a trailing dimension of 3.
    """
    if bands < 0:
        raise ValidationError("bands must be >= 0")
    if isinstance(p, torch.Tensor):
        if bands == 0:
            return p
        x = p[..., None, :] * _band_scales(bands, p.dtype)
        waves = torch.stack([torch.sin(x), torch.cos(x)], -2).flatten(-3)
        return torch.cat([p, waves], -1)
    p = np.asarray(p, dtype=np.float64)
    parts = [p]
    for k in range(bands):
        x = (2.0 ** k) * np.pi * p
        parts += [np.sin(x), np.cos(x)]
    return np.concatenate(parts, -1)


@lru_cache(maxsize=None)
def _band_scales(bands: int, dtype) -> torch.Tensor:
    return torch.tensor([(2.0 ** k) * torch.pi for k in range(bands)], dtype=dtype)[:, None]


def encoded_size(bands: int) -> int:
    return 6 * bands + 3


@lru_cache(maxsize=None)
def field_layout(bands: int = 6, dir_bands: int = 2, hidden: int = 64, depth: int = 4) -> ParamLayout:
    entries = []
    width = encoded_size(bands)
    for i in range(depth):
        entries += [(f"l{i}.w", (width, hidden)), (f"l{i}.b", (hidden,))]
        width = hidden
    entries += [("sigma.w", (hidden, 1)), ("sigma.b", (1,))]
    entries += [("latent.w", (hidden + encoded_size(dir_bands), 4)), ("latent.b", (4,))]
    return ParamLayout(entries)


@dataclass
class FieldState:
    """Flat MLP parameters plus the architecture needed to unpack them.

    Density comes from the last hidden layer through a softplus head; the
    4-channel latent head also sees the encoded view direction.
    """

    params: torch.Tensor
    encoding_bands: int = 6
    dir_bands: int = 2
    hidden: int = 64
    depth: int = 4
    step_count: int = 0

    def __post_init__(self):
        n = self.layout.size
        if self.params.ndim != 1 or self.params.numel() != n:
            raise ValidationError(f"expected {n} parameters, got {tuple(self.params.shape)}")
        if not bool(torch.isfinite(self.params).all()):
            raise ValidationError("field parameters must be finite")

    @property
    def layout(self) -> ParamLayout:
        return field_layout(self.encoding_bands, self.dir_bands, self.hidden, self.depth)

    @property
    def layer_dims(self) -> list:
        return [list(shape) for name, shape in self.layout.entries if name.endswith(".w")]

    @property
    def dtype(self):
        return self.params.dtype

    def arch(self) -> dict:
        return {
            "encoding_bands": self.encoding_bands,
            "dir_bands": self.dir_bands,
            "hidden": self.hidden,
            "depth": self.depth,
        }


def init_field(seed: int = 0, dtype=torch.float32, zero_heads: bool = False, **arch) -> FieldState:
    layout = field_layout(**arch)
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in layout.entries:
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        elif zero_heads and name.split(".")[0] in ("sigma", "latent"):
            tensors[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    flat = torch.as_tensor(np.concatenate([tensors[n].reshape(-1) for n, _ in layout.entries]), dtype=dtype)
    return FieldState(flat, **arch)


def field_forward(params: torch.Tensor, state: FieldState, pos: torch.Tensor, dirs: torch.Tensor):
    """Evaluate the MLP at ``(n, 3)`` positions and unit directions.

    ``params`` is passed separately so callers can differentiate through it.
    Returns ``(latent (n, 4), sigma (n,))``.
    """
    w = state.layout.unflatten(params)
    h = positional_encode(pos, state.encoding_bands)
    for i in range(state.depth):
        h = torch.relu(h @ w[f"l{i}.w"] + w[f"l{i}.b"])
    sigma = F.softplus(h @ w["sigma.w"] + w["sigma.b"])[..., 0]
    d = positional_encode(dirs, state.dir_bands)
    z = torch.cat([h, d], -1) @ w["latent.w"] + w["latent.b"]
    return z, sigma


def field_eval(state: FieldState, p, v):
    """Single-point evaluation returning ``(z4, sigma)`` as numpy values."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    v = np.asarray(v, dtype=np.float64).reshape(3)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v))):
        raise ValidationError("field_eval inputs must be finite")
    with torch.no_grad():
        z, s = field_forward(
            state.params,
            state,
            torch.as_tensor(p, dtype=state.dtype)[None],
            torch.as_tensor(v, dtype=state.dtype)[None],
        )
    return z[0].numpy().astype(np.float64), float(s[0])
