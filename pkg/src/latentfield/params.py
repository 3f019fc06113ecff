"""Flat parameter vectors with named slices, and a first-order Adam update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


class ParamLayout:
    """Ordered ``name -> shape`` map over one flat vector."""

    def __init__(self, entries):
        self.entries = [(name, tuple(shape)) for name, shape in entries]
        self.offsets = {}
        off = 0
        for name, shape in self.entries:
            n = int(np.prod(shape, dtype=np.int64))
            self.offsets[name] = (off, off + n, shape)
            off += n
        self.size = off

    def unflatten(self, flat: torch.Tensor) -> dict:
        return {name: flat[a:b].view(shape) for name, (a, b, shape) in self.offsets.items()}

    def flatten(self, tensors: dict) -> torch.Tensor:
        return torch.cat([tensors[name].reshape(-1) for name, _ in self.entries])


@dataclass
class AdamState:
    """Adam moments for one parameter group."""

    m: torch.Tensor
    v: torch.Tensor
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: torch.Tensor, lr: float) -> "AdamState":
        return cls(torch.zeros_like(param), torch.zeros_like(param), 0, lr)

    def update(self, param: torch.Tensor, grad: torch.Tensor, lr_scale: float = 1.0) -> torch.Tensor:
        """Return the updated parameter; moments are advanced in place."""
        self.step += 1
        self.m.mul_(self.beta1).add_(grad, alpha=1 - self.beta1)
        self.v.mul_(self.beta2).addcmul_(grad, grad, value=1 - self.beta2)
        mhat = self.m / (1 - self.beta1 ** self.step)
        vhat = self.v / (1 - self.beta2 ** self.step)
        return param - self.lr * lr_scale * mhat / (vhat.sqrt() + self.eps)
