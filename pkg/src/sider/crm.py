"""Key-gated nested invertible hiding in the Haar wavelet domain.

Two stacks of affine coupling blocks:

* the deep stack hides the secret in the cover, conditioned on a key tensor;
* the shallow stack hides the decoy in the deep stack's stego output.

Recovery always undoes the shallow stack first. Only a key that matches the
bundle's commitment goes on to undo the deep stack.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import math
import secrets
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import ndtri

from .checkpoint import atomic_write_bytes
from .diffusion import TrainingDiverged
from .wavelet import dwt_stacked, idwt_stacked

log = logging.getLogger(__name__)

KEY_BITS = 128
SALT_BYTES = 16
BUNDLE_FORMAT_VERSION = 1
PLANE_CHANNELS = 12  # 4 sub-bands x RGB


# ---------------------------------------------------------------------------
# keys


@dataclass(frozen=True)
class ProtectionKey:
    bits: bytes
    key_id: bytes  # public salt

    def __post_init__(self):
        if len(self.bits) != KEY_BITS // 8:
            raise ValueError(f"key must be {KEY_BITS} bits")

    @classmethod
    def generate(cls, salt: bytes | None = None) -> "ProtectionKey":
        return cls(secrets.token_bytes(KEY_BITS // 8), salt if salt is not None else secrets.token_bytes(SALT_BYTES))

    @classmethod
    def from_hex(cls, text: str, salt: bytes) -> "ProtectionKey":
        try:
            bits = bytes.fromhex(text.strip())
        except ValueError:
            raise ValueError("key must be hex-encoded") from None
        return cls(bits, salt)

    def hex(self) -> str:
        return self.bits.hex()

    def with_salt(self, salt: bytes) -> "ProtectionKey":
        return ProtectionKey(self.bits, salt)

    def __repr__(self):
        return f"ProtectionKey(key_id={self.key_id.hex()})"


def commitment(key: ProtectionKey) -> str:
    return hmac.new(key.bits, b"sider-commit|" + key.key_id, hashlib.sha256).hexdigest()


def verify_commitment(key: ProtectionKey, expected: str) -> bool:
    return hmac.compare_digest(commitment(key), expected)


def _prf_stream(key: ProtectionKey, n_bytes: int) -> bytes:
    # HMAC-SHA256 in counter mode
    out = bytearray()
    counter = 0
    while len(out) < n_bytes:
        out += hmac.new(key.bits, b"sider-expand|" + key.key_id + counter.to_bytes(8, "little"),
                        hashlib.sha256).digest()
        counter += 1
    return bytes(out[:n_bytes])


def key_expand(key: ProtectionKey, shape: tuple[int, ...]) -> np.ndarray:
    """Deterministic standard-normal tensor derived from ``(bits, salt)``."""
    n = int(np.prod(shape))
    raw = np.frombuffer(_prf_stream(key, 4 * n), dtype="<u4").astype(np.float64)
    u = (raw + 0.5) / 2.0 ** 32
    return ndtri(u).reshape(shape).astype(np.float32)


# ---------------------------------------------------------------------------
# invertible blocks


def _subnet(ch_in: int, ch_out: int, hidden: int) -> nn.Sequential:
    net = nn.Sequential(
        nn.Conv2d(ch_in, hidden, 3, padding=1), nn.LeakyReLU(0.2),
        nn.Conv2d(hidden, hidden, 3, padding=1), nn.LeakyReLU(0.2),
        nn.Conv2d(hidden, ch_out, 3, padding=1),
    )
    nn.init.zeros_(net[-1].weight)
    nn.init.zeros_(net[-1].bias)
    return net


class CouplingBlock(nn.Module):
    """Affine coupling on a (host, guest) pair with optional conditioning.

    forward:  y1 = x1 + φ(x2, k);   y2 = x2 ⊙ exp(s(y1, k)) + η(y1, k)
    with s bounded to [−clamp, clamp] through a scaled sigmoid, so the block
    is invertible for every parameter value.
    """

    def __init__(self, channels: int = PLANE_CHANNELS, cond_channels: int = 0, hidden: int = 32,
                 clamp: float = 2.0):
        super().__init__()
        self.clamp = clamp
        self.phi = _subnet(channels + cond_channels, channels, hidden)
        self.rho = _subnet(channels + cond_channels, channels, hidden)
        self.eta = _subnet(channels + cond_channels, channels, hidden)

    def _scale(self, a: torch.Tensor) -> torch.Tensor:
        return self.clamp * (2.0 * torch.sigmoid(a) - 1.0)

    @staticmethod
    def _cat(x, cond):
        return x if cond is None else torch.cat([x, cond], dim=1)

    def forward(self, x1, x2, cond=None):
        y1 = x1 + self.phi(self._cat(x2, cond))
        h = self._cat(y1, cond)
        y2 = x2 * torch.exp(self._scale(self.rho(h))) + self.eta(h)
        return y1, y2

    def inverse(self, y1, y2, cond=None):
        h = self._cat(y1, cond)
        x2 = (y2 - self.eta(h)) * torch.exp(-self._scale(self.rho(h)))
        x1 = y1 - self.phi(self._cat(x2, cond))
        return x1, x2


class CouplingStack(nn.Module):
    def __init__(self, n_blocks: int = 3, channels: int = PLANE_CHANNELS, cond_channels: int = 0,
                 hidden: int = 32, clamp: float = 2.0):
        super().__init__()
        self.cond_channels = cond_channels
        self.blocks = nn.ModuleList(CouplingBlock(channels, cond_channels, hidden, clamp) for _ in range(n_blocks))

    def forward(self, host, guest, cond=None):
        for b in self.blocks:
            host, guest = b(host, guest, cond)
        return host, guest

    def inverse(self, stego, aux, cond=None):
        for b in reversed(self.blocks):
            stego, aux = b.inverse(stego, aux, cond)
        return stego, aux


class CRM(nn.Module):
    """The deep (keyed) and shallow (unkeyed) stacks over wavelet planes."""

    def __init__(self, n_blocks: int = 3, hidden: int = 32, key_channels: int = 4, clamp: float = 2.0):
        super().__init__()
        self.arch = dict(n_blocks=n_blocks, hidden=hidden, key_channels=key_channels, clamp=clamp)
        self.key_channels = key_channels
        self.deep = CouplingStack(n_blocks, PLANE_CHANNELS, key_channels, hidden, clamp)
        self.shallow = CouplingStack(n_blocks, PLANE_CHANNELS, 0, hidden, clamp)
        self.register_buffer("trained", torch.zeros(()))

    def key_tensor(self, keys: list[ProtectionKey] | ProtectionKey, plane_hw: tuple[int, int],
                   dtype=torch.float32) -> torch.Tensor:
        if isinstance(keys, ProtectionKey):
            keys = [keys]
        shape = (self.key_channels,) + tuple(plane_hw)
        return torch.from_numpy(np.stack([key_expand(k, shape) for k in keys])).to(dtype)

    # plane-level operations -------------------------------------------------

    def deep_embed(self, cover_planes, secret_planes, key_cond):
        return self.deep(cover_planes, secret_planes, _batch(key_cond, cover_planes))

    def deep_invert(self, inter_planes, key_cond, r_sub):
        return self.deep.inverse(inter_planes, r_sub, _batch(key_cond, inter_planes))

    def shallow_embed(self, inter_planes, decoy_planes):
        return self.shallow(inter_planes, decoy_planes)

    def shallow_invert(self, protected_planes, r_sub):
        return self.shallow.inverse(protected_planes, r_sub)

    # image-level operations -------------------------------------------------

    def protect_images(self, cover, decoy, secret, key_cond):
        """Protected image (unclamped) plus both auxiliary latents."""
        inter, r_deep = self.deep_embed(dwt_stacked(cover), dwt_stacked(secret), key_cond)
        protected, r_shallow = self.shallow_embed(inter, dwt_stacked(decoy))
        return idwt_stacked(protected), r_deep, r_shallow

    def recover_images(self, x_hat, key_cond=None, r_shallow=None, r_deep=None):
        """Shallow inverse, then (if ``key_cond`` is given) deep inverse.

        Returns ``(decoy', secret')``; ``secret'`` is None without a key.
        """
        planes = dwt_stacked(x_hat)
        inter, decoy_planes = self.shallow_invert(planes, r_shallow)
        decoy = idwt_stacked(decoy_planes)
        if key_cond is None:
            return decoy, None
        _, secret_planes = self.deep_invert(inter, key_cond, r_deep)
        return decoy, idwt_stacked(secret_planes)


def _batch(cond, like):
    if cond is not None and cond.shape[0] == 1 and like.shape[0] > 1:
        return cond.expand(like.shape[0], -1, -1, -1)
    return cond


def aux_noise(shape, seed: int, stream: int, dtype=torch.float32) -> torch.Tensor:
    """Standard-normal stand-in for a discarded auxiliary latent."""
    gen = torch.Generator().manual_seed(int(seed) * 2 + stream)
    return torch.randn(shape, generator=gen, dtype=torch.float32).to(dtype)


def randomize_(module: nn.Module, seed: int, gain: float = 1.0) -> nn.Module:
    """Redraw every parameter: weights N(0, gain²/fan_in), biases N(0, 0.01²).

    Used to check bijectivity at arbitrary (non-trained, non-zero) parameters.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if p.ndim > 1:
                fan_in = p[0].numel()
                p.copy_(gain / math.sqrt(fan_in) * torch.randn(p.shape, generator=gen))
            else:
                p.copy_(0.01 * torch.randn(p.shape, generator=gen))
    return module


# ---------------------------------------------------------------------------
# bundles


class RecoveryPath(str, Enum):
    AUTHORIZED = "AUTHORIZED"
    UNAUTHORIZED = "UNAUTHORIZED"


class BundleError(ValueError):
    pass


@dataclass(frozen=True)
class ProtectedBundle:
    x_hat: np.ndarray  # H x W x 3 in [0, 1], 8-bit representable
    key_salt: bytes
    commitment: str
    aux_seed: int
    format_version: int = BUNDLE_FORMAT_VERSION

    def sidecar(self) -> dict:
        return {"format_version": self.format_version, "key_salt": self.key_salt.hex(),
                "commitment": self.commitment, "aux_seed": self.aux_seed}

    def save(self, png_path: str | Path) -> Path:
        from .data import to_uint8
        from PIL import Image
        import io

        png_path = Path(png_path)
        buf = io.BytesIO()
        Image.fromarray(to_uint8(self.x_hat), "RGB").save(buf, format="PNG")
        atomic_write_bytes(png_path, buf.getvalue())
        side = sidecar_path(png_path)
        atomic_write_bytes(side, (json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n").encode())
        return side

    @classmethod
    def load(cls, png_path: str | Path) -> "ProtectedBundle":
        from .data import load_image

        png_path = Path(png_path)
        try:
            doc = json.loads(sidecar_path(png_path).read_text())
            version = int(doc["format_version"])
            salt = bytes.fromhex(doc["key_salt"])
            commit = str(doc["commitment"])
            aux_seed = int(doc["aux_seed"])
        except FileNotFoundError:
            raise BundleError(f"missing sidecar for {png_path}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise BundleError(f"corrupt sidecar header: {exc}") from None
        if version != BUNDLE_FORMAT_VERSION:
            raise BundleError(f"unsupported bundle format {version}")
        if len(commit) != 64:
            raise BundleError("corrupt sidecar header: bad commitment")
        return cls(load_image(png_path), salt, commit, aux_seed, version)


def sidecar_path(png_path: str | Path) -> Path:
    p = Path(png_path)
    return p.with_name(p.name + ".json")


def _to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None].float()


def _to_image(t: torch.Tensor) -> np.ndarray:
    return t[0].detach().clamp(0.0, 1.0).numpy().transpose(1, 2, 0)


@torch.no_grad()
def protect(crm: CRM, x_cover: np.ndarray, x_decoy: np.ndarray, x_secret: np.ndarray,
            key: ProtectionKey, aux_seed: int | None = None) -> ProtectedBundle:
    """Embed secret then decoy; auxiliary latents are dropped."""
    from .data import quantize

    if not (x_cover.shape == x_decoy.shape == x_secret.shape):
        raise ValueError("cover, decoy and secret must share one shape")
    if not float(crm.trained):
        log.warning("CRM is untrained; recovery quality is not guaranteed")
    h, w = x_cover.shape[:2]
    k = crm.key_tensor(key, (h // 2, w // 2))
    x_hat, _, _ = crm.protect_images(_to_tensor(x_cover), _to_tensor(x_decoy), _to_tensor(x_secret), k)
    if aux_seed is None:
        aux_seed = secrets.randbelow(2 ** 31)
    return ProtectedBundle(quantize(_to_image(x_hat)), key.key_id, commitment(key), int(aux_seed))


def _layers(crm: CRM, bundle: ProtectedBundle):
    x = _to_tensor(bundle.x_hat)
    shape = (1, PLANE_CHANNELS, x.shape[-2] // 2, x.shape[-1] // 2)
    inter, decoy_planes = crm.shallow_invert(dwt_stacked(x), aux_noise(shape, bundle.aux_seed, 0))
    return inter, decoy_planes, shape


def _deep(crm: CRM, inter, shape, key: ProtectionKey, aux_seed: int) -> np.ndarray:
    k = crm.key_tensor(key, shape[-2:])
    _, secret_planes = crm.deep_invert(inter, k, aux_noise(shape, aux_seed, 1))
    return _to_image(idwt_stacked(secret_planes))


@torch.no_grad()
def recover(crm: CRM, bundle: ProtectedBundle, key_attempt: ProtectionKey | bytes | None = None,
            trace: list | None = None) -> tuple[np.ndarray, RecoveryPath]:
    """Unauthorized path yields the decoy layer; a verified key yields the secret."""
    inter, decoy_planes, shape = _layers(crm, bundle)
    if trace is not None:
        trace.append("shallow_invert")
    key = None
    if key_attempt is not None:
        bits = key_attempt.bits if isinstance(key_attempt, ProtectionKey) else bytes(key_attempt)
        if len(bits) == KEY_BITS // 8:
            candidate = ProtectionKey(bits, bundle.key_salt)
            if verify_commitment(candidate, bundle.commitment):
                key = candidate
    if key is None:
        return _to_image(idwt_stacked(decoy_planes)), RecoveryPath.UNAUTHORIZED
    out = _deep(crm, inter, shape, key, bundle.aux_seed)
    if trace is not None:
        trace.append("deep_invert")
    return out, RecoveryPath.AUTHORIZED


@torch.no_grad()
def ungated_deep_inversion(crm: CRM, bundle: ProtectedBundle, key: ProtectionKey) -> np.ndarray:
    """Deep inversion under any key, skipping the commitment check.

    Only for measuring how much a wrong key reveals; ``recover`` never does this.
    """
    inter, _, shape = _layers(crm, bundle)
    return _deep(crm, inter, shape, key, bundle.aux_seed)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class CRMLossWeights:
    hiding: float = 1.0
    decoy: float = 2.0
    secret: float = 4.0
    low_freq: float = 1.0
    wrong_key: float = 1.0


def _quantize_ste(x: torch.Tensor) -> torch.Tensor:
    q = torch.round(x.clamp(0.0, 1.0) * 255.0) / 255.0
    return x + (q - x).detach()


def crm_losses(crm: CRM, cover, decoy, secret, keys, wrong_keys, gen: torch.Generator,
               weights: CRMLossWeights) -> tuple[torch.Tensor, dict]:
    """One training objective evaluation on a batch of image triples."""
    hw = (cover.shape[-2] // 2, cover.shape[-1] // 2)
    C, D, S = dwt_stacked(cover), dwt_stacked(decoy), dwt_stacked(secret)
    inter, _ = crm.deep_embed(C, S, keys)
    protected, _ = crm.shallow_embed(inter, D)
    x_hat = _quantize_ste(idwt_stacked(protected))
    P = dwt_stacked(x_hat)

    z_s = torch.randn(C.shape, generator=gen)
    z_d = torch.randn(C.shape, generator=gen)
    inter_rec, D_rec = crm.shallow_invert(P, z_s)
    _, S_rec = crm.deep_invert(inter_rec, keys, z_d)
    _, S_wrong = crm.deep_invert(inter_rec, wrong_keys, z_d)

    parts = {
        "hiding": F.mse_loss(x_hat, cover) + F.mse_loss(inter, C),
        "decoy": F.mse_loss(D_rec, D),
        "secret": F.mse_loss(S_rec, S),
        "low_freq": F.mse_loss(protected[:, :3], C[:, :3]),
        "wrong_key": F.mse_loss(S_wrong, D),
    }
    total = sum(getattr(weights, k) * v for k, v in parts.items())
    return total, {k: float(v.detach()) for k, v in parts.items()}


def random_keys(n: int, rng: np.random.Generator) -> list[ProtectionKey]:
    return [ProtectionKey(rng.bytes(KEY_BITS // 8), rng.bytes(SALT_BYTES)) for _ in range(n)]


def tiles(images: np.ndarray, size: int) -> np.ndarray:
    """Non-overlapping ``size``×``size`` tiles of ``(N, C, H, W)`` images, tile-major."""
    n, c, h, w = images.shape
    if h % size or w % size:
        raise ValueError(f"cannot tile {h}x{w} into {size}x{size}")
    t = images.reshape(n, c, h // size, size, w // size, size).transpose(2, 4, 0, 1, 3, 5)
    return np.ascontiguousarray(t.reshape(-1, c, size, size))


def train_crm(covers: np.ndarray, decoys: np.ndarray, secrets_: np.ndarray, epochs: int, seed: int = 0,
              weights: CRMLossWeights = CRMLossWeights(), crm: CRM | None = None, batch_size: int = 16,
              lr: float = 1e-3, n_blocks: int = 3, hidden: int = 32, crop: int | None = None,
              history: list | None = None) -> CRM:
    """Fit both stacks on ``(N, 3, H, W)`` triples with random keys per sample.

    Both stacks are fully convolutional, so ``crop`` trains on tiles of the
    triples instead of whole images at a fraction of the cost.
    """
    torch.manual_seed(seed)
    if crm is None:
        crm = CRM(n_blocks=n_blocks, hidden=hidden)
    if epochs == 0:
        return crm
    if crop:
        covers, decoys, secrets_ = (tiles(a, crop) for a in (covers, decoys, secrets_))
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed + 17)
    c, d, s = (torch.from_numpy(a) for a in (covers, decoys, secrets_))
    hw = (c.shape[-2] // 2, c.shape[-1] // 2)
    opt = torch.optim.Adam(crm.parameters(), lr=lr)
    steps_per_epoch = max(1, len(c) // batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, lr, total_steps=epochs * steps_per_epoch, pct_start=0.15)
    crm.train()
    step = 0
    for epoch in range(epochs):
        perm = torch.randperm(len(c), generator=gen)
        for i in range(steps_per_epoch):
            idx = perm[i * batch_size:(i + 1) * batch_size]
            keys = crm.key_tensor(random_keys(len(idx), rng), hw)
            wrong = crm.key_tensor(random_keys(len(idx), rng), hw)
            loss, parts = crm_losses(crm, c[idx], d[idx], s[idx], keys, wrong, gen, weights)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"CRM diverged at step {step}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(crm.parameters(), 1.0)
            opt.step()
            sched.step()
            step += 1
            if history is not None:
                history.append({"step": step, "loss": float(loss.detach()), **parts})
        log.info("crm epoch %d loss %.6f %s", epoch, loss.item(), parts)
    crm.trained.fill_(1.0)
    return crm.eval()
