"""Face image ingestion and a procedural synthetic-face generator.

Images are float arrays ``H x W x 3`` in ``[0, 1]``. Real data is read from
``<root>/<identity>/<image>.png``; the synthetic generator renders simple
parametric faces so that every run works without external datasets.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
SPLITS = ("train", "val", "test")
DEFAULT_SPLIT_FRACTIONS = (0.7, 0.15, 0.15)

# identity vector layout; every entry lives in [0, 1]
IDENTITY_FIELDS = (
    "skin_r", "skin_g", "skin_b",
    "hair_r", "hair_g", "hair_b",
    "face_width", "face_height",
    "eye_spacing", "eye_size", "hair_height", "mouth_width",
)


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray
    identity_id: int
    source: str = "synthetic"

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected HxWx3 pixels, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def resolution(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class DatasetManifest:
    samples: tuple[ImageSample, ...]
    split: dict[int, str]
    origin: dict = field(default_factory=dict)
    skipped: int = 0

    def __post_init__(self):
        ids = {s.identity_id for s in self.samples}
        if len(ids) < 2:
            raise ValueError("need ≥2 identities for verification pairs")
        missing = ids - set(self.split)
        if missing:
            raise ValueError(f"identities without split assignment: {sorted(missing)}")

    @property
    def identity_count(self) -> int:
        return len({s.identity_id for s in self.samples})

    def identities(self, split: str | None = None) -> list[int]:
        ids = sorted({s.identity_id for s in self.samples})
        if split is None:
            return ids
        return [i for i in ids if self.split[i] == split]

    def subset(self, split: str) -> list[ImageSample]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [s for s in self.samples if self.split[s.identity_id] == split]

    def arrays(self, split: str | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Stack pixels as ``N x 3 x H x W`` float32 plus identity labels."""
        samples = list(self.samples) if split is None else self.subset(split)
        if not samples:
            raise ValueError(f"split {split!r} is empty")
        x = np.stack([s.pixels.transpose(2, 0, 1) for s in samples]).astype(np.float32)
        y = np.array([s.identity_id for s in samples], dtype=np.int64)
        return x, y

    def data_hash(self) -> str:
        h = hashlib.sha256()
        for s in self.samples:
            h.update(str(s.identity_id).encode())
            h.update(np.ascontiguousarray(s.pixels).tobytes())
        return h.hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps({
            "origin": self.origin,
            "identity_count": self.identity_count,
            "skipped": self.skipped,
            "data_hash": self.data_hash(),
            "split": {str(k): v for k, v in sorted(self.split.items())},
            "samples": [{"identity_id": s.identity_id, "source": s.source} for s in self.samples],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        """Rebuild a manifest by re-running the generator or loader it records."""
        doc = json.loads(text)
        origin = doc["origin"]
        kind = origin.get("kind")
        if kind == "synthetic":
            m = synth_faces(origin["n_identities"], origin["per_identity"], origin["seed"],
                            resolution=origin["resolution"], pose_jitter=origin["pose_jitter"])
        elif kind == "directory":
            m = load_dataset(origin["dir"], origin["resolution"], seed=origin["seed"])
        else:
            raise ValueError(f"unknown manifest origin {kind!r}")
        if m.data_hash() != doc["data_hash"]:
            raise ValueError("manifest data hash mismatch")
        return m


def assign_splits(identity_ids: Iterable[int], seed: int,
                  fractions: Sequence[float] = DEFAULT_SPLIT_FRACTIONS) -> dict[int, str]:
    """Identity-disjoint train/val/test assignment; train and test are never empty."""
    ids = sorted(set(identity_ids))
    n = len(ids)
    if n < 2:
        raise ValueError("need ≥2 identities for verification pairs")
    order = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(fractions[2] * n)))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_test - 1)
    out = {}
    for rank, idx in enumerate(order):
        if rank < n_test:
            out[ids[idx]] = "test"
        elif rank < n_test + n_val:
            out[ids[idx]] = "val"
        else:
            out[ids[idx]] = "train"
    return out


def center_crop_resize(img: Image.Image, resolution: int) -> np.ndarray:
    img = img.convert("RGB")
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != resolution:
        img = img.resize((resolution, resolution), Image.BICUBIC)
    return np.asarray(img, dtype=np.float32) / 255.0


def load_image(path: str | Path, resolution: int | None = None) -> np.ndarray:
    with Image.open(path) as img:
        if resolution is None:
            return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        return center_crop_resize(img, resolution)


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    """Write an ``H x W x 3`` [0,1] array as 8-bit RGB PNG."""
    Image.fromarray(to_uint8(pixels), "RGB").save(path, format="PNG")


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize(pixels: np.ndarray) -> np.ndarray:
    """8-bit round trip, i.e. what a saved PNG will hold."""
    return to_uint8(pixels).astype(np.float32) / 255.0


def load_dataset(dir: str | Path, resolution: int = 64, seed: int = 0) -> DatasetManifest:
    root = Path(dir)
    if not root.is_dir():
        raise ValueError(f"no data: {root} is not a directory")
    id_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    samples: list[ImageSample] = []
    skipped = 0
    for identity_id, d in enumerate(id_dirs):
        for f in sorted(d.iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                px = load_image(f, resolution)
            except OSError as exc:
                skipped += 1
                log.warning("skipping unreadable image %s (%s)", f, exc)
                continue
            samples.append(ImageSample(px, identity_id, str(f)))
    if not samples:
        raise ValueError(f"no data under {root}")
    if skipped:
        log.warning("%d unreadable file(s) skipped under %s", skipped, root)
    ids = {s.identity_id for s in samples}
    if len(ids) < 2:
        raise ValueError("need ≥2 identities for verification pairs")
    origin = {"kind": "directory", "dir": str(root), "resolution": resolution, "seed": seed}
    return DatasetManifest(tuple(samples), assign_splits(ids, seed), origin, skipped)


# ---------------------------------------------------------------------------
# synthetic faces


@dataclass(frozen=True)
class SyntheticFaceSpec:
    identity_vector: tuple[float, ...]
    pose_jitter: float = 1.0
    seed: int = 0

    def __post_init__(self):
        v = tuple(float(a) for a in self.identity_vector)
        if len(v) != len(IDENTITY_FIELDS):
            raise ValueError(f"identity vector needs {len(IDENTITY_FIELDS)} entries")
        object.__setattr__(self, "identity_vector", v)


def random_identity_vector(rng: np.random.Generator) -> tuple[float, ...]:
    return tuple(float(a) for a in rng.uniform(0.0, 1.0, len(IDENTITY_FIELDS)))


def _soft(d: np.ndarray, width: float) -> np.ndarray:
    # signed distance -> coverage in [0,1]; anti-aliased edge about one pixel wide
    return 0.5 * (1.0 - np.tanh(d / width))


def render_face(spec: SyntheticFaceSpec, resolution: int = 64) -> np.ndarray:
    """Render one face. Pure function of ``(spec, resolution)``."""
    p = dict(zip(IDENTITY_FIELDS, spec.identity_vector))
    rng = np.random.default_rng([spec.seed, 7919])
    jit = spec.pose_jitter * rng.standard_normal(8)

    n = resolution
    coords = (np.arange(n, dtype=np.float64) + 0.5) / n - 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    # pose: shift, in-plane rotation, scale
    dx, dy = 0.025 * jit[0], 0.025 * jit[1]
    theta = math.radians(4.0 * jit[2])
    scale = 1.0 + 0.03 * jit[3]
    c, s = math.cos(theta), math.sin(theta)
    u = (c * (xx - dx) + s * (yy - dy)) / scale
    v = (-s * (xx - dx) + c * (yy - dy)) / scale
    edge = 1.2 / n

    tone = 0.45 + 0.5 * p["skin_r"]
    skin = tone * np.array([1.0, 0.62 + 0.2 * p["skin_g"], 0.45 + 0.25 * p["skin_b"]])
    hair = 0.05 + 0.8 * np.array([p["hair_r"], p["hair_g"] * p["hair_r"], p["hair_b"] * 0.7])
    bg_level = 0.55 + 0.08 * jit[4]
    bg = np.clip(np.array([bg_level, bg_level + 0.03, bg_level + 0.06]), 0.0, 1.0)
    light = 1.0 + 0.04 * jit[5]

    img = np.empty((n, n, 3), dtype=np.float64)
    img[:] = bg + 0.10 * v[..., None]

    fa = 0.24 + 0.12 * p["face_width"]
    fb = 0.32 + 0.10 * p["face_height"]
    face_d = (np.sqrt((u / fa) ** 2 + (v / fb) ** 2) - 1.0) * min(fa, fb)
    face_cov = _soft(face_d, edge)[..., None]
    shade = (1.0 - 0.25 * np.clip(np.sqrt((u / fa) ** 2 + (v / fb) ** 2), 0, 1) ** 2)[..., None]
    img = img * (1 - face_cov) + face_cov * np.clip(skin * shade * light, 0, 1)

    # hair band across the top of the head
    hair_top = -fb
    hair_bottom = -fb + (0.10 + 0.18 * p["hair_height"]) * 2 * fb
    band = _soft(v - hair_bottom, edge) * _soft(hair_top - 0.03 - v, edge)
    head = _soft(face_d - 0.03, edge)
    hair_cov = (band * head)[..., None]
    img = img * (1 - hair_cov) + hair_cov * hair

    # eyes
    ex = 0.08 + 0.10 * p["eye_spacing"]
    er = 0.025 + 0.025 * p["eye_size"]
    ey = -0.05 * fb / 0.37
    for side in (-1.0, 1.0):
        d_white = np.sqrt(((u - side * ex) / 1.5) ** 2 + (v - ey) ** 2) - er
        w = _soft(d_white, edge)[..., None]
        img = img * (1 - w) + w * np.array([0.95, 0.95, 0.95])
        d_pupil = np.sqrt((u - side * ex - 0.004 * jit[6]) ** 2 + (v - ey) ** 2) - 0.55 * er
        pc = _soft(d_pupil, edge)[..., None]
        img = img * (1 - pc) + pc * (0.6 * hair + 0.05)

    # mouth: flat ellipse, openness varies per image
    mw = 0.05 + 0.08 * p["mouth_width"]
    mh = 0.012 + 0.006 * abs(jit[7])
    my = 0.55 * fb
    d_mouth = (np.sqrt((u / mw) ** 2 + ((v - my) / mh) ** 2) - 1.0) * mh
    mc = _soft(d_mouth, edge)[..., None]
    img = img * (1 - mc) + mc * np.array([0.55, 0.12, 0.15])

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_faces(n_identities: int, per_identity: int, seed: int, resolution: int = 64,
                pose_jitter: float = 1.0) -> DatasetManifest:
    if n_identities < 2:
        raise ValueError("need ≥2 identities for verification pairs")
    if per_identity < 1:
        raise ValueError("per_identity must be ≥1")
    rng = np.random.default_rng(seed)
    samples = []
    for identity_id in range(n_identities):
        vec = random_identity_vector(rng)
        for j in range(per_identity):
            spec = SyntheticFaceSpec(vec, pose_jitter, seed=seed * 1_000_003 + identity_id * 1009 + j)
            samples.append(ImageSample(render_face(spec, resolution), identity_id, "synthetic"))
    origin = {"kind": "synthetic", "n_identities": n_identities, "per_identity": per_identity,
              "seed": seed, "resolution": resolution, "pose_jitter": pose_jitter}
    return DatasetManifest(tuple(samples), assign_splits(range(n_identities), seed), origin)
