"""Image quality metrics and protection reports.

All quality metrics take float images on the [0, 1] scale, shaped
``H x W x C`` or ``C x H x W`` (anything, as long as both inputs match).
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

REPORT_SCHEMA_VERSION = 1
PSNR_CAP = 99.0

# role names used throughout the reports
QUALITY_TAGS = ("Cover/Hidden", "Decoy/Recovery-Unauthorized", "Secret/Recovery-Authorized")
PROTECTION_ROLES = ("Cover", "Decoy", "Hidden", "Recovery-Unauthorized")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(m: float) -> float:
    if m < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / m))


def psnr(a, b) -> float:
    return psnr_from_mse(mse(a, b))


def ssim(a, b, window: int = 8, k1: float = 0.01, k2: float = 0.03, channel_axis: int = -1) -> float:
    """Mean SSIM over all valid ``window x window`` windows, averaged over channels.

    Uniform window, population statistics, dynamic range 1.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
        channel_axis = -1
    a = np.moveaxis(a, channel_axis, 0)
    b = np.moveaxis(b, channel_axis, 0)
    if a.shape[1] < window or a.shape[2] < window:
        raise ValueError(f"image {a.shape[1]}x{a.shape[2]} smaller than SSIM window {window}")
    c1, c2 = k1 ** 2, k2 ** 2
    wa = np.lib.stride_tricks.sliding_window_view(a, (window, window), axis=(1, 2))
    wb = np.lib.stride_tricks.sliding_window_view(b, (window, window), axis=(1, 2))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa ** 2).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb ** 2).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class QualityReport:
    psnr: float
    ssim: float
    mse: float
    rmse: float
    pair_tag: str


def quality(a, b, tag: str, channel_axis: int = -1) -> QualityReport:
    m = mse(a, b)
    return QualityReport(psnr_from_mse(m), ssim(a, b, channel_axis=channel_axis), m, math.sqrt(m), tag)


def quality_report(pairs: Sequence[tuple], channel_axis: int = -1) -> tuple[list[QualityReport], dict[str, QualityReport]]:
    """Per-pair reports plus per-tag means.

    PSNR in the aggregate is the mean of per-pair PSNRs, the way image-hiding
    tables usually report it.
    """
    if not pairs:
        raise ValueError("quality_report needs at least one pair")
    reports = [quality(a, b, tag, channel_axis) for a, b, tag in pairs]
    grouped: dict[str, list[QualityReport]] = defaultdict(list)
    for r in reports:
        grouped[r.pair_tag].append(r)
    agg = {}
    for tag, rs in grouped.items():
        m = float(np.mean([r.mse for r in rs]))
        agg[tag] = QualityReport(
            psnr=float(np.mean([r.psnr for r in rs])),
            ssim=float(np.mean([r.ssim for r in rs])),
            mse=m,
            rmse=float(np.mean([r.rmse for r in rs])),
            pair_tag=tag,
        )
    return reports, agg


def attack_success(sims: Iterable[float], tau: float) -> float:
    """Percentage of similarities at or above ``tau``."""
    s = np.asarray(list(sims), dtype=np.float64)
    if s.size == 0:
        raise ValueError("attack_success needs at least one similarity")
    return 100.0 * float(np.count_nonzero(s >= tau)) / s.size


@dataclass
class ProtectionReport:
    model_id: str
    tau: float
    n_samples: int
    asr: dict[str, float]
    mean_sim: dict[str, float]
    config_hash: str = ""
    extra: dict = field(default_factory=dict)


def protection_report(role_sims: dict[str, Sequence[float]], model_id: str, tau: float,
                      config_hash: str = "") -> ProtectionReport:
    """ASR per image role from similarities to the matching source images.

    ``role_sims`` maps a role name to similarities measured by the held-out
    model; all lists must be aligned with the same source list.
    """
    lengths = {len(v) for v in role_sims.values()}
    if len(lengths) != 1:
        raise ValueError("misaligned role lists")
    n = lengths.pop()
    asr = {role: attack_success(s, tau) for role, s in role_sims.items()}
    mean_sim = {role: float(np.mean(s)) for role, s in role_sims.items()}
    return ProtectionReport(model_id, float(tau), n, asr, mean_sim, config_hash)


# ---------------------------------------------------------------------------
# serialization


def quality_rows(agg: dict[str, QualityReport]) -> list[dict]:
    return [asdict(agg[k]) for k in sorted(agg)]


def to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def protection_rows(reports: Sequence[ProtectionReport]) -> list[dict]:
    rows = []
    for r in reports:
        for role, value in r.asr.items():
            rows.append({"model_id": r.model_id, "role": role, "asr": round(value, 4),
                         "mean_sim": round(r.mean_sim[role], 6), "tau": round(r.tau, 6),
                         "n_samples": r.n_samples})
    return rows


def report_json(quality_agg: dict[str, QualityReport], protection: Sequence[ProtectionReport], **extra) -> str:
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "quality": quality_rows(quality_agg),
        "protection": [asdict(p) for p in protection],
        **extra,
    }
    return json.dumps(doc, indent=2, sort_keys=True)
