"""Identity-anchored optimization of the initial diffusion latent.

The latent z_T is pushed, with momentum-accumulated sign steps restricted to
a face mask, so that the decoded image keeps the source identity under an
ensemble of embedders.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .diffusion import ConditionEmbedding, GuidanceConfig, LatentDiffusion, forward_noise, strength_to_start
from .identity import EnsembleConfig

log = logging.getLogger(__name__)

MASK_MODES = ("oval", "full", "external")


class DegenerateGradient(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    N: int = 30
    alpha: float = 0.01
    mu: float = 0.6
    guidance: GuidanceConfig = GuidanceConfig(s=1.0, lam=3.0)
    strength: float = 0.75
    seed_pair: tuple[int, int] = (0, 1)
    mask_mode: str = "oval"

    def __post_init__(self):
        if self.N < 0:
            raise ValueError("N must be ≥0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.mu < 0:
            raise ValueError("mu must be ≥0")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")

    def config_hash(self) -> str:
        doc = asdict(self)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# mask


def majority_downsample(mask: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    h, w = mask.shape
    oh, ow = out_hw
    if h % oh or w % ow:
        raise ValueError(f"cannot block-downsample {h}x{w} to {oh}x{ow}")
    blocks = mask.reshape(oh, h // oh, ow, w // ow).mean(axis=(1, 3))
    return (blocks >= 0.5).astype(np.float32)


def oval_mask(image_size: int, rx: float = 0.36, ry: float = 0.44) -> np.ndarray:
    c = (np.arange(image_size) + 0.5) / image_size - 0.5
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return ((xx / rx) ** 2 + (yy / ry) ** 2 <= 1.0).astype(np.float32)


def make_mask(image_size: int, latent_shape: tuple[int, int, int], mode: str = "oval",
              path: str | Path | None = None) -> torch.Tensor:
    """Binary face mask at latent resolution, shaped (1, 1, h, w)."""
    if mode == "full":
        m = np.ones(latent_shape[-2:], dtype=np.float32)
    elif mode == "oval":
        m = majority_downsample(oval_mask(image_size), latent_shape[-2:])
    elif mode == "external":
        if path is None or not Path(path).is_file():
            raise FileNotFoundError(f"mask image not found: {path}")
        with Image.open(path) as img:
            src = np.asarray(img.convert("L").resize((image_size, image_size), Image.NEAREST), dtype=np.float32) / 255.0
        m = majority_downsample((src >= 0.5).astype(np.float32), latent_shape[-2:])
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    return torch.from_numpy(m)[None, None]


# ---------------------------------------------------------------------------
# update rule


def grad_zT(diff: LatentDiffusion, zT: torch.Tensor, t_start: int, cond: ConditionEmbedding,
            g_cfg: GuidanceConfig, ens: EnsembleConfig, source: list[torch.Tensor],
            iteration: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample ensemble loss and its exact gradient w.r.t. z_T through decode∘Ω."""
    z = zT.detach().requires_grad_(True)
    with torch.enable_grad():
        x_gen = diff.generate(z, t_start, cond, g_cfg)
        loss = ens.loss(x_gen, source=source)
        (grad,) = torch.autograd.grad(loss.sum(), z)
    if not torch.isfinite(grad).all():
        bad = int((~torch.isfinite(grad)).sum())
        raise NonFiniteGradient(f"non-finite gradient at iteration {iteration}: {bad} entries, "
                                f"loss={loss.detach().tolist()}")
    return loss.detach(), grad


def momentum_step(g_prev: torch.Tensor, grad: torch.Tensor, mu: float) -> torch.Tensor:
    """g = μ·g_prev + grad/‖grad‖₁, with the ℓ1 norm taken per sample (leading dim)."""
    if g_prev.shape != grad.shape:
        raise ValueError("momentum and gradient shapes differ")
    l1 = grad.abs().flatten(1).sum(dim=1)
    if bool((l1 == 0).any()):
        raise DegenerateGradient("degenerate gradient: zero ℓ1 norm")
    return mu * g_prev + grad / l1.view(-1, *([1] * (grad.ndim - 1)))


def masked_update(zT: torch.Tensor, g: torch.Tensor, alpha: float, mask: torch.Tensor) -> torch.Tensor:
    """z_T − α·sign(M ⊙ g); coordinates with M = 0 are returned untouched."""
    return zT - alpha * torch.sign(mask * g)


# ---------------------------------------------------------------------------
# attack loop


@dataclass
class AttackResult:
    zT: torch.Tensor
    z_init: torch.Tensor
    loss_trace: np.ndarray  # (N + 1, B): loss before each update, then at the returned z_T
    momentum_l1: np.ndarray  # (N, B)
    x_gen: torch.Tensor | None = None


def init_latent(diff: LatentDiffusion, x: torch.Tensor, t_start: int, seed: int) -> torch.Tensor:
    with torch.no_grad():
        z0 = diff.autoencoder.encode(x)
    gen = torch.Generator().manual_seed(int(seed))
    eps = torch.randn(z0.shape, generator=gen, dtype=torch.float32).to(z0.dtype)
    return forward_noise(diff.schedule, z0, t_start, eps)


def attack(diff: LatentDiffusion, x: torch.Tensor, cond: ConditionEmbedding, ens: EnsembleConfig,
           config: AttackConfig, seed: int, mask: torch.Tensor | None = None,
           decode: bool = True) -> AttackResult:
    """Run N momentum/mask iterations from a partially noised encoding of ``x``."""
    t_start = strength_to_start(config.strength, diff.schedule.T)
    z_init = init_latent(diff, x, t_start, seed)
    if mask is None:
        mask = make_mask(x.shape[-1], tuple(z_init.shape[1:]), config.mask_mode)
    mask = mask.to(z_init.dtype)
    source = ens.source_embeddings(x)
    z = z_init.clone()
    g = torch.zeros_like(z)
    trace, l1s = [], []
    for k in range(config.N):
        loss, grad = grad_zT(diff, z, t_start, cond, config.guidance, ens, source, iteration=k)
        g = momentum_step(g, grad, config.mu)
        z = masked_update(z, g, config.alpha, mask)
        trace.append(loss.numpy().copy())
        l1s.append(g.abs().flatten(1).sum(1).numpy().copy())
    with torch.no_grad():
        x_gen = diff.generate(z, t_start, cond, config.guidance)
        trace.append(ens.loss(x_gen, source=source).numpy().copy())
    return AttackResult(z, z_init, np.stack(trace), np.stack(l1s) if l1s else np.zeros((0, len(x))),
                        x_gen if decode else None)


@dataclass
class AdversarialPair:
    x_cover: torch.Tensor
    x_decoy: torch.Tensor
    provenance: dict = field(default_factory=dict)
    traces: tuple[np.ndarray, np.ndarray] | None = None


def generate_pair(diff: LatentDiffusion, x: torch.Tensor, cond: ConditionEmbedding, ens: EnsembleConfig,
                  config: AttackConfig, mask: torch.Tensor | None = None) -> AdversarialPair:
    s1, s2 = config.seed_pair
    if s1 == s2:
        raise ValueError("seeds must differ")
    first = attack(diff, x, cond, ens, config, s1, mask)
    second = attack(diff, x, cond, ens, config, s2, mask)
    prov = {"seed_1": s1, "seed_2": s2, "config_hash": config.config_hash()}
    return AdversarialPair(first.x_gen.clamp(0, 1), second.x_gen.clamp(0, 1), prov,
                           (first.loss_trace, second.loss_trace))


def trace_csv(trace: np.ndarray) -> str:
    """``iteration,loss`` rows (batch-mean loss per iteration)."""
    lines = ["iteration,loss"]
    mean = trace.mean(axis=1) if trace.ndim == 2 else trace
    lines += [f"{i},{float(v):.8f}" for i, v in enumerate(mean)]
    return "\n".join(lines) + "\n"
