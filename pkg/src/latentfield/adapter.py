"""Residual refinement adapter: strided conv down, self-attention, transposed conv up.

The adapter restores inter-pixel interaction that a per-ray field cannot
express.  Its output convolution starts at zero so a fresh adapter is the
identity map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError
from .params import ParamLayout

LATENT_CHANNELS = 4
KERNEL = 3

# 4C^2 + 77C + 4 lands at 281,860 for C = 256, i.e. ~0.28M parameters
DEFAULT_CHANNELS = 256


@lru_cache(maxsize=None)
def adapter_layout(channels: int, latent_channels: int = LATENT_CHANNELS) -> ParamLayout:
    c, k, lc = channels, KERNEL, latent_channels
    return ParamLayout(
        [
            ("down.w", (c, lc, k, k)),
            ("down.b", (c,)),
            ("q.w", (c, c)),
            ("q.b", (c,)),
            ("k.w", (c, c)),
            ("k.b", (c,)),
            ("v.w", (c, c)),
            ("v.b", (c,)),
            ("o.w", (c, c)),
            ("o.b", (c,)),
            ("up.w", (c, lc, k, k)),
            ("up.b", (lc,)),
        ]
    )


def adapter_param_count(channels: int, latent_channels: int = LATENT_CHANNELS) -> int:
    if channels < 1:
        raise ValidationError("channels must be >= 1")
    return adapter_layout(channels, latent_channels).size


@dataclass
class AdapterWeights:
    params: torch.Tensor
    channels: int = DEFAULT_CHANNELS

    def __post_init__(self):
        if self.params.ndim != 1 or self.params.numel() != adapter_param_count(self.channels):
            raise ValidationError("adapter parameter vector does not match channel count")

    @property
    def layout(self) -> ParamLayout:
        return adapter_layout(self.channels)

    @property
    def dtype(self):
        return self.params.dtype


def init_adapter(channels: int = DEFAULT_CHANNELS, seed: int = 0, dtype=torch.float32) -> AdapterWeights:
    layout = adapter_layout(channels)
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in layout.entries:
        if name.endswith(".b") or name.startswith("up."):
            parts.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:])) if name == "down.w" else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            parts.append(rng.uniform(-bound, bound, size=shape))
    flat = torch.as_tensor(np.concatenate([p.reshape(-1) for p in parts]), dtype=dtype)
    return AdapterWeights(flat, channels)


def _check_even(h, w):
    if h % 2 or w % 2:
        raise ValidationError(f"adapter needs even spatial dims, got {(h, w)}")


def _attention(w, x):
    c, h, wd = x.shape[1:]
    tokens = x[0].reshape(c, h * wd).T
    q = tokens @ w["q.w"] + w["q.b"]
    k = tokens @ w["k.w"] + w["k.b"]
    v = tokens @ w["v.w"] + w["v.b"]
    attn = torch.softmax(q @ k.T / math.sqrt(c), dim=-1)
    out = (attn @ v) @ w["o.w"] + w["o.b"]
    return out.T.reshape(1, c, h, wd), attn


def adapter_forward_torch(params: torch.Tensor, channels: int, z_hat: torch.Tensor) -> torch.Tensor:
    """Refine an ``(H, W, 4)`` latent map; differentiable in ``params`` and ``z_hat``."""
    h, wd = z_hat.shape[:2]
    _check_even(h, wd)
    w = adapter_layout(channels).unflatten(params)
    x = z_hat.permute(2, 0, 1)[None]
    down = F.conv2d(x, w["down.w"], w["down.b"], stride=2, padding=1)
    att, _ = _attention(w, down)
    up = F.conv_transpose2d(att, w["up.w"], w["up.b"], stride=2, padding=1, output_padding=1)
    return z_hat + up[0].permute(1, 2, 0)


def adapter_forward(weights: AdapterWeights, z_hat):
    """``z_hat + ConvUp(SelfAttention(ConvDown(z_hat)))``.

    Accepts a LatentImage or an ``(H, W, 4)`` array and returns the same kind.
    """
    from .scene import LatentImage

    is_latent = isinstance(z_hat, LatentImage)
    data = z_hat.data if is_latent else np.asarray(z_hat)
    x = torch.as_tensor(data)
    with torch.no_grad():
        out = adapter_forward_torch(weights.params.to(x.dtype), weights.channels, x)
    out = out.numpy()
    return LatentImage(out, z_hat.view_id) if is_latent else out


def attention_matrix(weights: AdapterWeights, z_hat) -> np.ndarray:
    """Softmax attention weights over the down-sampled grid (rows sum to 1)."""
    data = np.asarray(getattr(z_hat, "data", z_hat))
    _check_even(*data.shape[:2])
    with torch.no_grad():
        w = weights.layout.unflatten(weights.params)
        x = torch.as_tensor(data, dtype=weights.dtype).permute(2, 0, 1)[None]
        down = F.conv2d(x, w["down.w"], w["down.b"], stride=2, padding=1)
        _, attn = _attention(w, down)
    return attn.numpy()


def loss_refinement(refined, target):
    """Mean over pixels of the squared L2 distance between 4-vectors."""
    from .training import loss_reconstruction

    return loss_reconstruction(refined, target)
