"""Single-level orthonormal 2-D Haar transform.

Works on anything indexable like ``x[..., H, W]`` (numpy arrays or torch
tensors); channels and batch dims ride along in the leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
import torch


@dataclass(frozen=True)
class WaveletPlanes:
    ll: Any
    lh: Any
    hl: Any
    hh: Any

    def stack(self, dim: int = -3):
        """Concatenate sub-bands along the channel axis: (..., 4C, H/2, W/2)."""
        if isinstance(self.ll, torch.Tensor):
            return torch.cat([self.ll, self.lh, self.hl, self.hh], dim=dim)
        return np.concatenate([self.ll, self.lh, self.hl, self.hh], axis=dim)

    @classmethod
    def unstack(cls, t, dim: int = -3) -> "WaveletPlanes":
        if isinstance(t, torch.Tensor):
            return cls(*torch.chunk(t, 4, dim=dim))
        return cls(*np.split(t, 4, axis=dim))

    def energy(self) -> float:
        return float(sum((p ** 2).sum() for p in (self.ll, self.lh, self.hl, self.hh)))


def dwt(x) -> WaveletPlanes:
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ValueError(f"Haar DWT needs even height and width, got {h}x{w}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return WaveletPlanes(
        ll=(a + b + c + d) / 2,
        lh=(a + b - c - d) / 2,
        hl=(a - b + c - d) / 2,
        hh=(a - b - c + d) / 2,
    )


def idwt(p: WaveletPlanes):
    ll, lh, hl, hh = p.ll, p.lh, p.hl, p.hh
    a = (ll + lh + hl + hh) / 2
    b = (ll + lh - hl - hh) / 2
    c = (ll - lh + hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    stack = torch.stack if isinstance(ll, torch.Tensor) else np.stack
    h, w = ll.shape[-2], ll.shape[-1]
    lead = tuple(ll.shape[:-2])
    top = stack([a, b], -1).reshape(lead + (h, 2 * w))
    bottom = stack([c, d], -1).reshape(lead + (h, 2 * w))
    return stack([top, bottom], -2).reshape(lead + (2 * h, 2 * w))


def dwt_stacked(x):
    return dwt(x).stack()


def idwt_stacked(t):
    return idwt(WaveletPlanes.unstack(t))
