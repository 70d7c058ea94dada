"""Small latent diffusion model: schedule, codec, ε-predictor, guided DDIM sampling.

Everything here is differentiable with respect to the latent so the whole
sampling chain can sit inside an optimization loop.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def abar(self, t: int) -> float:
        """Cumulative ᾱ_t with the convention ᾱ_0 = 1."""
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def make_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be ≥1")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    beta.setflags(write=False)
    alpha_bar.setflags(write=False)
    return NoiseSchedule(T, beta, alpha_bar)


def strength_to_start(strength: float, T: int) -> int:
    """Map denoising strength in (0, 1] to a start step, round-half-up."""
    if not 0.0 < strength <= 1.0:
        raise ValueError("strength must be in (0, 1]")
    return max(1, int(math.floor(strength * T + 0.5)))


def forward_noise(schedule: NoiseSchedule, z0: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [1, {schedule.T}]")
    if eps.shape != z0.shape:
        raise ValueError("noise must be shaped like the latent")
    a = schedule.abar(t)
    return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * eps


# ---------------------------------------------------------------------------
# conditioning


@dataclass(frozen=True)
class ConditionEmbedding:
    values: torch.Tensor  # (B, d_c)
    is_null: bool = False

    @classmethod
    def null(cls, batch: int, dim: int, dtype=torch.float32) -> "ConditionEmbedding":
        return cls(torch.zeros(batch, dim, dtype=dtype), True)

    def as_null(self) -> "ConditionEmbedding":
        return ConditionEmbedding(torch.zeros_like(self.values), True)

    def to(self, dtype) -> "ConditionEmbedding":
        return ConditionEmbedding(self.values.to(dtype), self.is_null)


class ConditionProvider(Protocol):
    dim: int

    def __call__(self, images: torch.Tensor) -> ConditionEmbedding: ...


class ThumbnailCondition:
    """Coarse colour layout of the source image as the condition vector.

    Stands in for a caption embedding: it describes what the image looks
    like at a coarse scale. A leading constant 1 keeps every real condition
    distinct from the all-zero null embedding.
    """

    def __init__(self, grid: int = 4):
        self.grid = grid
        self.dim = 1 + 3 * grid * grid

    def __call__(self, images: torch.Tensor) -> ConditionEmbedding:
        pooled = F.adaptive_avg_pool2d(images, self.grid).flatten(1)
        ones = torch.ones(images.shape[0], 1, dtype=images.dtype)
        return ConditionEmbedding(torch.cat([ones, 2.0 * pooled - 1.0], dim=1))


@dataclass(frozen=True)
class GuidanceConfig:
    s: float = 1.0
    lam: float = 3.0

    def __post_init__(self):
        if self.s < 0 or self.lam < 0:
            raise ValueError("guidance scale and modulation must be ≥0")

    @property
    def effective(self) -> float:
        return self.lam * self.s


# ---------------------------------------------------------------------------
# networks


def timestep_embedding(t: torch.Tensor, dim: int, T: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = (t.double()[:, None] / T) * 1000.0 * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, 2 * ch_out)
        self.norm2 = nn.GroupNorm(8, ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class Denoiser(nn.Module):
    """Conditional ε-predictor ε_θ(z_t, t, c); fully convolutional."""

    def __init__(self, latent_channels: int = 4, width: int = 64, cond_dim: int = 49,
                 T: int = 20, emb_dim: int = 128):
        super().__init__()
        self.arch = dict(latent_channels=latent_channels, width=width, cond_dim=cond_dim, T=T, emb_dim=emb_dim)
        self.T = T
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        # zero init: an untrained model ignores the condition, and a model that
        # never sees a real condition (p_drop = 1) keeps ignoring it
        self.cond_proj = nn.Linear(cond_dim, emb_dim)
        nn.init.zeros_(self.cond_proj.weight)
        nn.init.zeros_(self.cond_proj.bias)
        w = width
        self.inp = nn.Conv2d(latent_channels, w, 3, padding=1)
        self.down_block = ResBlock(w, w, emb_dim)
        self.down = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.mid1 = ResBlock(2 * w, 2 * w, emb_dim)
        self.mid2 = ResBlock(2 * w, 2 * w, emb_dim)
        self.up = nn.Conv2d(2 * w, w, 3, padding=1)
        self.up_block = ResBlock(2 * w, w, emb_dim)
        self.out_norm = nn.GroupNorm(8, w)
        self.out = nn.Conv2d(w, latent_channels, 3, padding=1)

    def forward(self, z: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(timestep_embedding(t, self.emb_dim, self.T).to(z.dtype))
        emb = F.silu(emb + self.cond_proj(cond))
        h0 = self.inp(z)
        h1 = self.down_block(h0, emb)
        h = self.down(h1)
        h = self.mid2(self.mid1(h, emb), emb)
        h = self.up(F.interpolate(h, size=h1.shape[-2:], mode="nearest"))
        h = self.up_block(torch.cat([h, h1], dim=1), emb)
        return self.out(F.silu(self.out_norm(h)))


class Autoencoder(nn.Module):
    """Image codec E/D. ``mode="identity"`` is an exact pass-through.

    The conv codec downsamples 4x into ``latent_channels`` channels. Decoder
    output goes through a sigmoid so it always lies in [0, 1].
    """

    def __init__(self, mode: str = "conv", latent_channels: int = 4, width: int = 64):
        super().__init__()
        if mode not in ("conv", "identity"):
            raise ValueError(f"unknown autoencoder mode {mode!r}")
        self.arch = dict(mode=mode, latent_channels=latent_channels, width=width)
        self.mode = mode
        self.latent_channels = 3 if mode == "identity" else latent_channels
        self.downsample = 1 if mode == "identity" else 4
        self.register_buffer("latent_scale", torch.ones(()))
        if mode == "identity":
            return
        w = width
        self.encoder = nn.Sequential(
            nn.Conv2d(3, w // 2, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w // 2, w, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w, w, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w, w // 2, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w // 2, 3, 3, padding=1),
        )

    def latent_shape(self, resolution: int) -> tuple[int, int, int]:
        s = resolution // self.downsample
        return (self.latent_channels, s, s)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(x.shape)}")
        if self.mode == "identity":
            return x
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValueError("image size must be divisible by 4")
        return self.encoder(x) * self.latent_scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ValueError(f"expected (B, {self.latent_channels}, h, w) latents, got {tuple(z.shape)}")
        if self.mode == "identity":
            return z.clamp(0.0, 1.0)
        return torch.sigmoid(self.decoder(z / self.latent_scale))

    def forward(self, x):
        return self.decode(self.encode(x))


# ---------------------------------------------------------------------------
# sampling


@dataclass
class LatentDiffusion:
    """Bundle of codec, ε-predictor and schedule used by the sampler."""

    autoencoder: Autoencoder
    denoiser: Denoiser
    schedule: NoiseSchedule

    def eps(self, z: torch.Tensor, t: int, cond: ConditionEmbedding) -> torch.Tensor:
        tt = torch.full((z.shape[0],), t, dtype=torch.long)
        values = cond.values.to(z.dtype)
        if values.shape[0] != z.shape[0]:
            values = values.expand(z.shape[0], -1)
        return self.denoiser(z, tt, values)

    def guided_score(self, z: torch.Tensor, t: int, cond: ConditionEmbedding, g: GuidanceConfig) -> torch.Tensor:
        eps_null = self.eps(z, t, cond.as_null() if not cond.is_null else cond)
        if cond.is_null or g.effective == 0.0:
            return eps_null
        eps_cond = self.eps(z, t, cond)
        return eps_null + g.effective * (eps_cond - eps_null)

    def ddim_step(self, z: torch.Tensor, t: int, cond: ConditionEmbedding, g: GuidanceConfig,
                  eps_fn: Callable | None = None) -> torch.Tensor:
        if t == 0:
            raise ValueError("already denoised")
        if not 1 <= t <= self.schedule.T:
            raise ValueError(f"timestep {t} outside [1, {self.schedule.T}]")
        eps = self.guided_score(z, t, cond, g) if eps_fn is None else eps_fn(z, t)
        a_t, a_prev = self.schedule.abar(t), self.schedule.abar(t - 1)
        x0_hat = (z - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
        return math.sqrt(a_prev) * x0_hat + math.sqrt(1.0 - a_prev) * eps

    def sample_omega(self, zT: torch.Tensor, t_start: int, cond: ConditionEmbedding, g: GuidanceConfig,
                     eps_fn: Callable | None = None) -> torch.Tensor:
        """Deterministic DDIM chain from ``t_start`` down to a clean latent."""
        if not 1 <= t_start <= self.schedule.T:
            raise ValueError(f"t_start {t_start} outside [1, {self.schedule.T}]")
        z = zT
        for t in range(t_start, 0, -1):
            z = self.ddim_step(z, t, cond, g, eps_fn)
        return z

    def generate(self, zT, t_start, cond, g) -> torch.Tensor:
        return self.autoencoder.decode(self.sample_omega(zT, t_start, cond, g))

    def to(self, dtype) -> "LatentDiffusion":
        self.autoencoder.to(dtype)
        self.denoiser.to(dtype)
        return self

    def eval(self) -> "LatentDiffusion":
        self.autoencoder.eval()
        self.denoiser.eval()
        for p in list(self.autoencoder.parameters()) + list(self.denoiser.parameters()):
            p.requires_grad_(False)
        return self


# ---------------------------------------------------------------------------
# training


def _check_finite(loss: torch.Tensor, what: str, step: int):
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"{what} diverged at step {step}: loss={loss.item()}")


def train_autoencoder(images: np.ndarray, epochs: int, seed: int = 0, latent_channels: int = 4,
                      width: int = 64, batch_size: int = 32, lr: float = 2e-3) -> Autoencoder:
    """Fit the conv codec with an L1+L2 reconstruction loss, then set the latent scale."""
    torch.manual_seed(seed)
    ae = Autoencoder("conv", latent_channels, width)
    if epochs == 0:
        return ae
    x = torch.from_numpy(images)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    steps_per_epoch = max(1, len(x) // batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, lr, total_steps=epochs * steps_per_epoch)
    step = 0
    for epoch in range(epochs):
        perm = torch.randperm(len(x), generator=gen)
        for i in range(steps_per_epoch):
            xb = x[perm[i * batch_size:(i + 1) * batch_size]]
            rec = ae.decode(ae.encoder(xb))
            loss = F.mse_loss(rec, xb) + 0.1 * F.l1_loss(rec, xb)
            _check_finite(loss, "autoencoder", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            step += 1
        log.info("autoencoder epoch %d loss %.5f", epoch, loss.item())
    with torch.no_grad():
        lat = torch.cat([ae.encoder(x[i:i + 256]) for i in range(0, len(x), 256)])
        ae.latent_scale.fill_(1.0 / float(lat.std()))
    return ae


def denoiser_loss(denoiser: Denoiser, schedule: NoiseSchedule, z0: torch.Tensor, cond: torch.Tensor,
                  gen: torch.Generator, p_drop: float = 0.0) -> torch.Tensor:
    B = z0.shape[0]
    t = torch.randint(1, schedule.T + 1, (B,), generator=gen)
    abar = torch.tensor(schedule.alpha_bar).to(z0.dtype)[t - 1].view(B, 1, 1, 1)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    zt = abar.sqrt() * z0 + (1 - abar).sqrt() * eps
    if p_drop > 0:
        keep = (torch.rand(B, generator=gen) >= p_drop).to(cond.dtype)[:, None]
        cond = cond * keep
    return F.mse_loss(denoiser(zt, t, cond), eps)


def train_denoiser(latents: np.ndarray, conds: np.ndarray, schedule: NoiseSchedule, epochs: int,
                   seed: int = 0, p_drop: float = 0.1, width: int = 64, batch_size: int = 32,
                   lr: float = 2e-3, denoiser: Denoiser | None = None) -> Denoiser:
    """ε-prediction MSE at uniformly drawn t, dropping the condition with prob ``p_drop``."""
    torch.manual_seed(seed)
    if denoiser is None:
        denoiser = Denoiser(latents.shape[1], width, conds.shape[1], schedule.T)
    if epochs == 0:
        return denoiser
    z = torch.from_numpy(latents)
    c = torch.from_numpy(conds)
    opt = torch.optim.AdamW(denoiser.parameters(), lr=lr, weight_decay=1e-4)
    gen = torch.Generator().manual_seed(seed + 1)
    steps_per_epoch = max(1, len(z) // batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, lr, total_steps=epochs * steps_per_epoch)
    step = 0
    for epoch in range(epochs):
        perm = torch.randperm(len(z), generator=gen)
        for i in range(steps_per_epoch):
            idx = perm[i * batch_size:(i + 1) * batch_size]
            loss = denoiser_loss(denoiser, schedule, z[idx], c[idx], gen, p_drop)
            _check_finite(loss, "denoiser", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            step += 1
        log.info("denoiser epoch %d loss %.5f", epoch, loss.item())
    return denoiser


@torch.no_grad()
def eval_denoiser(denoiser: Denoiser, schedule: NoiseSchedule, latents: np.ndarray, conds: np.ndarray,
                  seed: int = 123, repeats: int = 4) -> float:
    """Mean validation ε-MSE over random timesteps and noise draws."""
    gen = torch.Generator().manual_seed(seed)
    z, c = torch.from_numpy(latents), torch.from_numpy(conds)
    losses = [denoiser_loss(denoiser, schedule, z, c, gen).item() for _ in range(repeats)]
    return float(np.mean(losses))
