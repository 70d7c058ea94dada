"""Small face embedders, cosine verification and the ensemble identity loss."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import TrainingDiverged

log = logging.getLogger(__name__)

EMBED_DIM = 128
MIN_IMPOSTOR_PAIRS = 100


def arch_for_seed(arch_seed: int) -> dict:
    """Architecture table: depth, width and kernel vary with the seed."""
    return {
        "depth": 3 + arch_seed % 2,
        "width": 16 + 8 * ((arch_seed // 2) % 3),
        "kernel": 3 if (arch_seed // 6) % 2 == 0 else 5,
    }


class Embedder(nn.Module):
    def __init__(self, depth: int = 3, width: int = 16, kernel: int = 3, embed_dim: int = EMBED_DIM,
                 arch_seed: int = 0):
        super().__init__()
        self.arch = dict(depth=depth, width=width, kernel=kernel, embed_dim=embed_dim, arch_seed=arch_seed)
        self.model_id = f"emb{arch_seed}"
        layers: list[nn.Module] = [nn.Conv2d(3, width, kernel, padding=kernel // 2), nn.SiLU()]
        ch = width
        for i in range(depth):
            out = min(width * 2 ** (i + 1), 128)
            layers += [
                nn.Conv2d(ch, out, kernel, stride=2, padding=kernel // 2), nn.GroupNorm(4, out), nn.SiLU(),
                nn.Conv2d(out, out, 3, padding=1), nn.SiLU(),
            ]
            ch = out
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(ch * 4, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(2.0 * x - 1.0)
        h = F.adaptive_avg_pool2d(h, 2).flatten(1)
        return F.normalize(self.head(h), dim=1, eps=1e-12)

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def make_embedder(arch_seed: int) -> Embedder:
    return Embedder(**arch_for_seed(arch_seed), arch_seed=arch_seed)


def embed(model: Embedder, x: torch.Tensor) -> torch.Tensor:
    """Unit-norm identity embeddings for images ``(B, 3, H, W)`` in [0, 1]."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) images, got {tuple(x.shape)}")
    return model(x)


def cos_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum(dim=-1)


@torch.no_grad()
def embed_numpy(model: Embedder, images: np.ndarray, batch: int = 128) -> np.ndarray:
    model.eval()
    out = [model(torch.from_numpy(images[i:i + batch]).float()) for i in range(0, len(images), batch)]
    return torch.cat(out).numpy()


# ---------------------------------------------------------------------------
# ensemble loss


@dataclass
class EnsembleConfig:
    models: list[Embedder]
    weights: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.models:
            raise ValueError("ensemble needs at least one model")
        w = np.ones(len(self.models)) if not self.weights else np.asarray(self.weights, dtype=np.float64)
        if len(w) != len(self.models) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be nonnegative, one per model, not all zero")
        self.weights = list(w / w.sum())

    @property
    def model_ids(self) -> list[str]:
        return [m.model_id for m in self.models]

    def source_embeddings(self, x: torch.Tensor) -> list[torch.Tensor]:
        with torch.no_grad():
            return [m(x) for m in self.models]

    def loss(self, x_gen: torch.Tensor, x: torch.Tensor | None = None,
             source: list[torch.Tensor] | None = None) -> torch.Tensor:
        """Per-sample Σ_f w_f (1 − cos(f(x_gen), f(x))), shape (B,)."""
        if source is None:
            source = [m(x) for m in self.models]
        total = x_gen.new_zeros(x_gen.shape[0])
        for w, m, e_src in zip(self.weights, self.models, source):
            total = total + w * (1.0 - cos_sim(m(x_gen), e_src.to(x_gen.dtype)))
        return total

    def eval(self) -> "EnsembleConfig":
        for m in self.models:
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)
        return self

    def to(self, dtype) -> "EnsembleConfig":
        for m in self.models:
            m.to(dtype)
        return self


def ensemble_loss(ens: EnsembleConfig, x_gen: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return ens.loss(x_gen, x)


# ---------------------------------------------------------------------------
# verification thresholds


@dataclass(frozen=True)
class VerificationThreshold:
    tau: float
    far_target: float
    model_id: str
    n_pairs: int
    data_hash: str

    def as_dict(self) -> dict:
        return {"model_id": self.model_id, "tau": self.tau, "far_target": self.far_target,
                "n_pairs": self.n_pairs, "data_hash": self.data_hash}


def threshold_from_impostors(sims: Sequence[float], far_target: float = 0.01) -> float:
    """Empirical impostor quantile: the ⌈far·n⌉-th largest score.

    The fraction of impostor scores ≥ τ is then the first achievable value at
    or above ``far_target``; ties resolve to the higher value.
    """
    s = np.sort(np.asarray(sims, dtype=np.float64))[::-1]
    if s.size == 0:
        raise ValueError("no impostor scores")
    if not 0.0 < far_target <= 1.0:
        raise ValueError("far_target must be in (0, 1]")
    k = max(1, min(s.size, math.ceil(far_target * s.size - 1e-9)))
    return float(s[k - 1])


def pair_similarities(emb: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Genuine and impostor cosine scores over all unordered pairs."""
    sims = emb @ emb.T
    iu = np.triu_indices(len(labels), k=1)
    same = labels[iu[0]] == labels[iu[1]]
    vals = sims[iu]
    return vals[same], vals[~same]


def calibrate_threshold(model: Embedder, images: np.ndarray, labels: np.ndarray,
                        far_target: float = 0.01) -> VerificationThreshold:
    if len(set(labels.tolist())) < 2:
        raise ValueError("insufficient pairs: need ≥2 identities")
    emb = embed_numpy(model, images)
    _, impostor = pair_similarities(emb, labels)
    if impostor.size < MIN_IMPOSTOR_PAIRS:
        raise ValueError(f"insufficient pairs: {impostor.size} impostor pairs < {MIN_IMPOSTOR_PAIRS}")
    h = hashlib.sha256(np.ascontiguousarray(images).tobytes())
    h.update(np.ascontiguousarray(labels).tobytes())
    return VerificationThreshold(threshold_from_impostors(impostor, far_target), far_target,
                                 model.model_id, int(impostor.size), h.hexdigest()[:16])


# ---------------------------------------------------------------------------
# training


def _gaussian_kernel(sigma: torch.Tensor, size: int = 5) -> torch.Tensor:
    r = torch.arange(size, dtype=torch.float32) - size // 2
    k = torch.exp(-(r[None, :] ** 2) / (2 * sigma[:, None] ** 2))
    return k / k.sum(dim=1, keepdim=True)


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    # photometric jitter, blur, resampling, shifts and noise, so the embedder
    # keys on identity rather than on codec-level detail
    B, C, H, W = x.shape
    gain = 1.0 + 0.08 * torch.randn(B, 1, 1, 1, generator=gen)
    bias = 0.04 * torch.randn(B, 1, 1, 1, generator=gen)
    x = x * gain + bias
    sigma = 0.1 + 1.4 * torch.rand(B, generator=gen)
    k = _gaussian_kernel(sigma)
    xp = F.pad(x, (2, 2, 2, 2), mode="replicate")
    rows = F.conv2d(xp.reshape(1, B * C, H + 4, W + 4), k.repeat_interleave(C, 0)[:, None, None, :], groups=B * C)
    x = F.conv2d(rows, k.repeat_interleave(C, 0)[:, None, :, None], groups=B * C).reshape(B, C, H, W)
    down = (torch.rand(B, 1, 1, 1, generator=gen) < 0.3).to(x.dtype)
    small = F.interpolate(F.avg_pool2d(x, 2), size=(H, W), mode="bilinear", align_corners=False)
    x = down * small + (1 - down) * x
    dy, dx = (int(v) for v in torch.randint(-2, 3, (2,), generator=gen))
    x = torch.roll(x, shifts=(dy, dx), dims=(2, 3))
    x = x + 0.03 * torch.rand(B, 1, 1, 1, generator=gen) * torch.randn(x.shape, generator=gen)
    return x.clamp(0.0, 1.0)


def train_embedder(images: np.ndarray, labels: np.ndarray, arch_seed: int, epochs: int,
                   batch_size: int = 64, lr: float = 3e-3, margin: float = 0.35,
                   scale: float = 30.0) -> Embedder:
    """CosFace-style large-margin classifier over the training identities."""
    torch.manual_seed(1000 + arch_seed)
    model = make_embedder(arch_seed)
    if epochs == 0:
        return model.eval()
    classes, y = np.unique(labels, return_inverse=True)
    x = torch.from_numpy(images)
    y = torch.from_numpy(y.astype(np.int64))
    proxies = nn.Parameter(F.normalize(torch.randn(len(classes), EMBED_DIM), dim=1))
    params = list(model.parameters()) + [proxies]
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=5e-4)
    gen = torch.Generator().manual_seed(2000 + arch_seed)
    steps_per_epoch = max(1, math.ceil(len(x) / batch_size))
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, lr, total_steps=epochs * steps_per_epoch)
    model.train()
    step = 0
    for epoch in range(epochs):
        perm = torch.randperm(len(x), generator=gen)
        for i in range(steps_per_epoch):
            idx = perm[i * batch_size:(i + 1) * batch_size]
            e = model(_augment(x[idx], gen))
            logits = e @ F.normalize(proxies, dim=1).T
            logits = scale * (logits - margin * F.one_hot(y[idx], len(classes)))
            loss = F.cross_entropy(logits, y[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"embedder {arch_seed} diverged at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            step += 1
        log.info("embedder %d epoch %d loss %.4f", arch_seed, epoch, loss.item())
    return model.eval()


def genuine_accept_rate(model: Embedder, images: np.ndarray, labels: np.ndarray, tau: float) -> float:
    genuine, _ = pair_similarities(embed_numpy(model, images), labels)
    return float(np.mean(genuine >= tau))
