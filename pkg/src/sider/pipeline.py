"""Orchestration: training, protection, recovery and batch evaluation.

Every command reads a :class:`~sider.config.PipelineConfig` and works inside
its ``workdir``::

    checkpoints/   autoencoder, denoiser, embedder_<seed>, crm (.sck files)
    thresholds.json
    manifests/     one RunManifest per command
    reports/       CSV/JSON reports, loss traces and figures

Failures surface as :class:`PipelineError` carrying a stable exit code.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .attack import AttackConfig, AttackResult, DegenerateGradient, NonFiniteGradient, attack, make_mask
from .checkpoint import CheckpointError, atomic_write_bytes, file_sha256, load_module, save_module
from .config import ConfigError, PipelineConfig
from .crm import (CRM, BundleError, CRMLossWeights, ProtectedBundle, ProtectionKey, SALT_BYTES, protect,
                  recover, train_crm, ungated_deep_inversion)
from .data import DatasetManifest, load_dataset, load_image, quantize, save_image, synth_faces
from .diffusion import (Autoencoder, Denoiser, GuidanceConfig, LatentDiffusion, ThumbnailCondition,
                        TrainingDiverged, make_schedule, strength_to_start, train_autoencoder, train_denoiser)
from .identity import (EnsembleConfig, Embedder, VerificationThreshold, calibrate_threshold, cos_sim,
                       train_embedder)
from .metrics import protection_report, protection_rows, quality_report, quality_rows, report_json, to_csv

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_MISSING_CHECKPOINT = 4
EXIT_BUNDLE = 5

REGISTRY = {"autoencoder": Autoencoder, "denoiser": Denoiser, "embedder": Embedder, "crm": CRM}
COMPONENTS = ("denoiser", "embedders", "crm")
ATTACK_BATCH = 16


class PipelineError(RuntimeError):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class RunManifest:
    command: str
    config_hash: str
    checkpoints: dict[str, str] = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    timing: dict[str, float] = field(default_factory=dict)
    version: str = __version__

    def write(self, workdir: Path, name: str) -> Path:
        path = workdir / "manifests" / f"{name}.json"
        atomic_write_bytes(path, (json.dumps(asdict(self), indent=2, sort_keys=True) + "\n").encode())
        return path


# ---------------------------------------------------------------------------
# workdir helpers


def ckpt_path(cfg: PipelineConfig, name: str) -> Path:
    return cfg.workdir / "checkpoints" / f"{name}.sck"


def _load(cfg: PipelineConfig, name: str):
    path = ckpt_path(cfg, name)
    if not path.is_file():
        raise PipelineError(f"missing checkpoint {path}; run `sider train` first", EXIT_MISSING_CHECKPOINT)
    try:
        module, header = load_module(path, REGISTRY)
    except (CheckpointError, KeyError, RuntimeError) as exc:
        raise PipelineError(f"unreadable checkpoint {path}: {exc}", EXIT_MISSING_CHECKPOINT) from None
    return module.eval(), header


def load_data(cfg: PipelineConfig) -> DatasetManifest:
    d = cfg["data"]
    try:
        if d["source"] == "synthetic":
            return synth_faces(d["n_identities"], d["per_identity"], d["seed"], d["resolution"], d["pose_jitter"])
        return load_dataset(cfg.resolve(d["source"]), d["resolution"], seed=d["seed"])
    except ValueError as exc:
        raise PipelineError(str(exc), EXIT_CONFIG) from None


def _split(manifest: DatasetManifest, split: str) -> tuple[np.ndarray, np.ndarray]:
    try:
        return manifest.arrays(split)
    except ValueError as exc:
        raise PipelineError(str(exc), EXIT_CONFIG) from None


def cond_provider(cfg: PipelineConfig) -> ThumbnailCondition:
    return ThumbnailCondition(cfg["diffusion"]["cond_grid"])


def schedule_from(cfg: PipelineConfig):
    d = cfg["diffusion"]
    return make_schedule(d["T"], d["beta_min"], d["beta_max"])


def attack_config(cfg: PipelineConfig, mu: float | None = None) -> AttackConfig:
    a = cfg["attack"]
    lam = a["lambda_s"] / a["s"] if a["s"] > 0 else 0.0
    return AttackConfig(N=a["N"], alpha=a["alpha"], mu=a["mu"] if mu is None else mu,
                        guidance=GuidanceConfig(s=a["s"], lam=lam), strength=a["strength"],
                        seed_pair=tuple(a["seeds"]), mask_mode=a["mask_mode"])


def load_diffusion(cfg: PipelineConfig) -> tuple[LatentDiffusion, dict[str, str]]:
    ae, _ = _load(cfg, "autoencoder")
    dn, _ = _load(cfg, "denoiser")
    ids = {n: file_sha256(ckpt_path(cfg, n)) for n in ("autoencoder", "denoiser")}
    return LatentDiffusion(ae, dn, schedule_from(cfg)).eval(), ids


def load_embedders(cfg: PipelineConfig) -> tuple[dict[int, Embedder], dict[int, float], dict[str, str]]:
    models, ids = {}, {}
    for s in cfg["embedders"]["arch_seeds"]:
        models[s], _ = _load(cfg, f"embedder_{s}")
        ids[f"embedder_{s}"] = file_sha256(ckpt_path(cfg, f"embedder_{s}"))
    path = cfg.workdir / "thresholds.json"
    if not path.is_file():
        raise PipelineError(f"missing thresholds file {path}", EXIT_MISSING_CHECKPOINT)
    doc = json.loads(path.read_text())
    taus = {int(k): float(v["tau"]) for k, v in doc["thresholds"].items()}
    missing = set(models) - set(taus)
    if missing:
        raise PipelineError(f"no calibrated threshold for embedder(s) {sorted(missing)}", EXIT_MISSING_CHECKPOINT)
    return models, taus, ids


def surrogate_ensemble(models: dict[int, Embedder], heldout: int) -> EnsembleConfig:
    return EnsembleConfig([m for s, m in sorted(models.items()) if s != heldout]).eval()


def attack_mask(cfg: PipelineConfig, diff: LatentDiffusion, image_size: int) -> torch.Tensor:
    a = cfg["attack"]
    path = cfg.resolve(a["mask_path"]) if a["mask_path"] else None
    try:
        return make_mask(image_size, diff.autoencoder.latent_shape(image_size), a["mask_mode"], path)
    except (FileNotFoundError, ValueError) as exc:
        raise PipelineError(str(exc), EXIT_CONFIG) from None


def batched_attack(diff: LatentDiffusion, x: torch.Tensor, provider, ens: EnsembleConfig,
                   config: AttackConfig, seed: int, mask: torch.Tensor,
                   batch: int = ATTACK_BATCH) -> tuple[torch.Tensor, np.ndarray]:
    """Attack in fixed-size chunks; results are concatenated in input order."""
    outs, traces = [], []
    for i in range(0, len(x), batch):
        xb = x[i:i + batch]
        try:
            res: AttackResult = attack(diff, xb, provider(xb), ens, config, seed + i, mask)
        except (DegenerateGradient, NonFiniteGradient) as exc:
            raise PipelineError(f"attack failed on images {i}..{i + len(xb) - 1}: {exc}", EXIT_TRAINING) from None
        outs.append(res.x_gen.clamp(0.0, 1.0))
        traces.append(res.loss_trace)
    return torch.cat(outs), np.concatenate(traces, axis=1)


def spread_subset(labels: np.ndarray, n: int) -> np.ndarray:
    """Indices of up to ``n`` samples, cycling over identities so each appears early."""
    order = np.argsort(labels, kind="stable")
    ranks = np.zeros(len(labels), dtype=np.int64)
    prev, r = None, 0
    for i in order:
        r = r + 1 if labels[i] == prev else 0
        ranks[i], prev = r, labels[i]
    picked = np.lexsort((labels, ranks))
    return picked[:n]


def _seed_salt(seed: int) -> tuple[bytes, int]:
    h = hashlib.sha256(f"sider-protect:{seed}".encode()).digest()
    return h[:SALT_BYTES], int.from_bytes(h[SALT_BYTES:SALT_BYTES + 4], "little") & 0x7FFFFFFF


# ---------------------------------------------------------------------------
# train


def _train_denoiser(cfg: PipelineConfig, manifest: DatasetManifest, seed: int | None) -> dict[str, str]:
    a, d = dict(cfg["autoencoder"]), dict(cfg["diffusion"])
    if seed is not None:
        a["seed"] = d["seed"] = seed
    xtr, _ = _split(manifest, "train")
    if a["mode"] == "identity":
        ae = Autoencoder("identity")
    else:
        ae = train_autoencoder(xtr, a["epochs"], seed=a["seed"], latent_channels=a["latent_channels"],
                               width=a["width"], lr=a["lr"])
    ae.eval()
    provider = cond_provider(cfg)
    with torch.no_grad():
        x = torch.from_numpy(xtr)
        z = torch.cat([ae.encode(x[i:i + 256]) for i in range(0, len(x), 256)]).numpy()
        c = provider(x).values.numpy()
    dn = train_denoiser(z, c, schedule_from(cfg), d["epochs"], seed=d["seed"], p_drop=d["p_drop"],
                        width=d["width"])
    meta = {"config": cfg.block_hash("data", "autoencoder", "diffusion"), "data_hash": manifest.data_hash()}
    return {
        "autoencoder": save_module(ckpt_path(cfg, "autoencoder"), ae, "autoencoder", meta),
        "denoiser": save_module(ckpt_path(cfg, "denoiser"), dn.eval(), "denoiser", meta),
    }


def _train_embedders(cfg: PipelineConfig, manifest: DatasetManifest) -> dict[str, str]:
    e = cfg["embedders"]
    xtr, ytr = _split(manifest, "train")
    xva, yva = _split(manifest, "val")
    ids, thresholds = {}, {}
    for s in e["arch_seeds"]:
        model = train_embedder(xtr, ytr, s, e["epochs"])
        try:
            th: VerificationThreshold = calibrate_threshold(model, xva, yva, cfg["eval"]["far_target"])
        except ValueError as exc:
            raise PipelineError(str(exc), EXIT_CONFIG) from None
        name = f"embedder_{s}"
        ids[name] = save_module(ckpt_path(cfg, name), model, "embedder",
                                {"config": cfg.block_hash("data", "embedders"), "tau": th.tau})
        thresholds[str(s)] = {**th.as_dict(), "checkpoint": ids[name]}
    doc = {"far_target": cfg["eval"]["far_target"], "thresholds": thresholds}
    atomic_write_bytes(cfg.workdir / "thresholds.json", (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
    return ids


def crm_triples(cfg: PipelineConfig, diff: LatentDiffusion, x: np.ndarray) -> tuple[np.ndarray, ...]:
    """(cover, decoy, secret) from two independent regenerations of each source.

    Training covers are plain regenerations (no identity optimization); the
    CRM only needs images from the same distribution as attack outputs.
    """
    a = cfg["attack"]
    provider = cond_provider(cfg)
    g = attack_config(cfg).guidance
    t_start = strength_to_start(a["strength"], diff.schedule.T)
    from .attack import init_latent

    covers, decoys = [], []
    with torch.no_grad():
        for i in range(0, len(x), 64):
            xb = torch.from_numpy(x[i:i + 64])
            c = provider(xb)
            for seed, out in zip(a["seeds"], (covers, decoys)):
                z = init_latent(diff, xb, t_start, seed + i)
                out.append(quantize(diff.generate(z, t_start, c, g).clamp(0, 1).numpy()))
    return np.concatenate(covers), np.concatenate(decoys), quantize(x)


def _train_crm(cfg: PipelineConfig, manifest: DatasetManifest, seed: int | None) -> dict[str, str]:
    c = dict(cfg["crm"])
    if seed is not None:
        c["seed"] = seed
    diff, upstream = load_diffusion(cfg)
    xtr, _ = _split(manifest, "train")
    idx = np.arange(c["n_triples"]) % len(xtr)
    covers, decoys, secrets_ = crm_triples(cfg, diff, xtr[idx])
    crm = CRM(n_blocks=c["n_blocks"], hidden=c["hidden"], key_channels=c["key_channels"], clamp=c["clamp"])
    crm = train_crm(covers, decoys, secrets_, c["epochs"], seed=c["seed"], weights=CRMLossWeights(**c["loss_weights"]),
                    crm=crm, batch_size=c["batch_size"], lr=c["lr"], crop=c["crop"])
    meta = {"config": cfg.block_hash("data", "crm"), "upstream": upstream}
    return {"crm": save_module(ckpt_path(cfg, "crm"), crm, "crm", meta)}


def cmd_train(cfg: PipelineConfig, component: str, seed: int | None = None) -> RunManifest:
    if component not in COMPONENTS:
        raise PipelineError(f"unknown component {component!r}; choose from {', '.join(COMPONENTS)}", EXIT_CONFIG)
    t0 = time.time()
    manifest = load_data(cfg)
    torch.manual_seed(0)
    try:
        if component == "denoiser":
            ids = _train_denoiser(cfg, manifest, seed)
        elif component == "embedders":
            ids = _train_embedders(cfg, manifest)
        else:
            ids = _train_crm(cfg, manifest, seed)
    except TrainingDiverged as exc:
        raise PipelineError(f"training aborted: {exc}", EXIT_TRAINING) from None
    run = RunManifest("train", cfg.config_hash(), ids,
                      seeds={"override": seed, "data": cfg["data"]["seed"]},
                      outputs=[str(ckpt_path(cfg, n)) for n in ids],
                      timing={"seconds": round(time.time() - t0, 3)})
    run.outputs.append(str(run.write(cfg.workdir, f"train_{component}")))
    return run


# ---------------------------------------------------------------------------
# protect / recover


def _read_input(cfg: PipelineConfig, path: str | Path) -> np.ndarray:
    try:
        img = load_image(path)
    except (OSError, ValueError) as exc:
        raise PipelineError(f"cannot read input image {path}: {exc}", EXIT_CONFIG) from None
    h, w = img.shape[:2]
    if h != w or h % 4:
        raise PipelineError(f"input must be square with side divisible by 4, got {w}x{h}", EXIT_CONFIG)
    return img


def cmd_protect(cfg: PipelineConfig, input_path: str | Path, out_path: str | Path,
                key: ProtectionKey | bytes | None = None, seed: int | None = None) -> tuple[dict, ProtectionKey]:
    """Returns a summary (safe to print) and the key (for the secure channel only)."""
    t0 = time.time()
    diff, ids = load_diffusion(cfg)
    models, _, emb_ids = load_embedders(cfg)
    crm, _ = _load(cfg, "crm")
    ids.update(emb_ids)
    ids["crm"] = file_sha256(ckpt_path(cfg, "crm"))

    secret = quantize(_read_input(cfg, input_path))
    x = torch.from_numpy(secret.transpose(2, 0, 1).copy())[None]
    ens = surrogate_ensemble(models, cfg["embedders"]["heldout"])
    config = attack_config(cfg)
    mask = attack_mask(cfg, diff, x.shape[-1])
    s1, s2 = config.seed_pair
    cover, _ = batched_attack(diff, x, cond_provider(cfg), ens, config, s1, mask)
    decoy, _ = batched_attack(diff, x, cond_provider(cfg), ens, config, s2, mask)

    if seed is not None:
        salt, aux_seed = _seed_salt(seed)
    else:
        salt, aux_seed = None, None
    if key is None:
        key = ProtectionKey.generate(salt)
    else:
        bits = key.bits if isinstance(key, ProtectionKey) else bytes(key)
        key = ProtectionKey(bits, salt if salt is not None else ProtectionKey.generate().key_id)
    to_img = lambda t: quantize(t[0].numpy().transpose(1, 2, 0))  # noqa: E731
    bundle = protect(crm, to_img(cover), to_img(decoy), secret, key, aux_seed=aux_seed)
    side = bundle.save(out_path)
    run = RunManifest("protect", cfg.config_hash(), ids, seeds={"seed": seed, "attack": list(config.seed_pair)},
                      outputs=[str(out_path), str(side)], timing={"seconds": round(time.time() - t0, 3)})
    run.write(cfg.workdir, "protect")
    summary = {"bundle": str(out_path), "sidecar": str(side), "shape": list(bundle.x_hat.shape),
               "commitment": bundle.commitment}
    return summary, key


def cmd_recover(cfg: PipelineConfig, bundle_path: str | Path, out_path: str | Path,
                key_bits: bytes | None = None) -> dict:
    crm, _ = _load(cfg, "crm")
    try:
        bundle = ProtectedBundle.load(bundle_path)
    except BundleError as exc:
        raise PipelineError(str(exc), EXIT_BUNDLE) from None
    except (OSError, ValueError) as exc:
        raise PipelineError(f"cannot read bundle image: {exc}", EXIT_BUNDLE) from None
    image, path = recover(crm, bundle, key_bits)
    save_image(image, out_path)
    return {"path": path.value, "output": str(out_path)}


# ---------------------------------------------------------------------------
# evaluate


def _sims(model: Embedder, a: torch.Tensor, b: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        return cos_sim(model(a), model(b)).numpy()


def _nchw(imgs: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack([i.transpose(2, 0, 1) for i in imgs]).astype(np.float32))


def evaluate_rotation(cfg: PipelineConfig, diff: LatentDiffusion, models: dict[int, Embedder],
                      heldout: int, x: torch.Tensor, mu: float | None = None,
                      seeds: tuple[int, ...] | None = None) -> dict:
    """Attack ``x`` with the surrogates of one held-out rotation.

    Returns generated images and loss traces keyed by attack seed.
    """
    config = attack_config(cfg, mu)
    ens = surrogate_ensemble(models, heldout)
    mask = attack_mask(cfg, diff, x.shape[-1])
    out = {}
    for s in seeds if seeds is not None else config.seed_pair:
        out[s] = batched_attack(diff, x, cond_provider(cfg), ens, config, s, mask)
    return out


def cmd_evaluate(cfg: PipelineConfig, ablate_momentum: bool | None = None) -> dict:
    t0 = time.time()
    e = cfg["eval"]
    ablate = e["ablate_momentum"] if ablate_momentum is None else ablate_momentum
    diff, ids = load_diffusion(cfg)
    models, taus, emb_ids = load_embedders(cfg)
    crm, _ = _load(cfg, "crm")
    ids.update(emb_ids)
    ids["crm"] = file_sha256(ckpt_path(cfg, "crm"))

    manifest = load_data(cfg)
    try:
        xte, yte = manifest.arrays("test")
    except ValueError:
        raise PipelineError("test split is empty", EXIT_CONFIG) from None
    pick = spread_subset(yte, e["n_test"])
    x = torch.from_numpy(quantize(xte[pick]))
    secrets_ = [quantize(xi.transpose(1, 2, 0)) for xi in x.numpy()]

    heldouts = list(cfg["embedders"]["arch_seeds"]) if e["rotate_heldout"] else [cfg["embedders"]["heldout"]]
    s1, s2 = cfg["attack"]["seeds"]
    rng = np.random.default_rng(e["seed"])
    reports, qpairs, traces, grid = [], [], {}, {}
    out_dir = cfg.workdir / "reports"
    outputs = []
    for h in heldouts:
        runs = evaluate_rotation(cfg, diff, models, h, x)
        covers = [quantize(c.numpy().transpose(1, 2, 0)) for c in runs[s1][0]]
        decoys = [quantize(c.numpy().transpose(1, 2, 0)) for c in runs[s2][0]]
        hidden, unauth, auth, wrong = [], [], [], []
        for i in range(len(x)):
            key = ProtectionKey(rng.bytes(16), rng.bytes(SALT_BYTES))
            bundle = protect(crm, covers[i], decoys[i], secrets_[i], key, aux_seed=i)
            hidden.append(bundle.x_hat)
            unauth.append(quantize(recover(crm, bundle, None)[0]))
            auth.append(quantize(recover(crm, bundle, key)[0]))
            wrong_key = ProtectionKey(rng.bytes(16), bundle.key_salt)
            wrong.append(quantize(ungated_deep_inversion(crm, bundle, wrong_key)))
        for i in range(len(x)):
            qpairs += [(covers[i], hidden[i], "Cover/Hidden"),
                       (decoys[i], unauth[i], "Decoy/Recovery-Unauthorized"),
                       (secrets_[i], auth[i], "Secret/Recovery-Authorized"),
                       (secrets_[i], wrong[i], "Secret/Wrong-Key")]
        ref = models[h]
        role_sims = {
            "Cover": _sims(ref, _nchw(covers), x),
            "Decoy": _sims(ref, _nchw(decoys), x),
            "Hidden": _sims(ref, _nchw(hidden), x),
            "Recovery-Unauthorized": _sims(ref, _nchw(unauth), x),
        }
        traces[f"{models[h].model_id} mu={cfg['attack']['mu']}"] = runs[s1][1]
        extra = {"median_final_loss": float(np.median(runs[s1][1][-1]))}
        if ablate:
            abl = evaluate_rotation(cfg, diff, models, h, x, mu=0.0, seeds=(s1,))
            role_sims["Cover(mu=0)"] = _sims(ref, abl[s1][0], x)
            traces[f"{models[h].model_id} mu=0"] = abl[s1][1]
            extra["median_final_loss_mu0"] = float(np.median(abl[s1][1][-1]))
        rep = protection_report(role_sims, ref.model_id, taus[h], cfg.config_hash())
        rep.extra.update(extra)
        reports.append(rep)
        if not grid:
            grid = {"source": secrets_, "cover": covers, "decoy": decoys, "hidden": hidden,
                    "unauthorized": unauth, "authorized": auth}

    _, agg = quality_report(qpairs)
    files = {
        "report.json": report_json(agg, reports, n_test=len(x), heldout_rotation=heldouts,
                                   config_hash=cfg.config_hash(), checkpoints=ids) + "\n",
        "quality.csv": to_csv(quality_rows(agg)),
        "protection.csv": to_csv(protection_rows(reports)),
    }
    for label, tr in traces.items():
        files[f"trace_{label.replace(' ', '_').replace('=', '')}.csv"] = _trace_table(tr)
    hashes = {}
    for name, text in files.items():
        data = text.encode()
        atomic_write_bytes(out_dir / name, data)
        hashes[name] = hashlib.sha256(data).hexdigest()
        outputs.append(str(out_dir / name))

    from . import plotting

    fig_dir = out_dir / "figures"
    outputs.append(str(plotting.asr_bars(reports, fig_dir / "asr.png")))
    outputs.append(str(plotting.loss_traces(traces, fig_dir / "loss.png")))
    outputs.append(str(plotting.image_grid(grid, fig_dir / "samples.png")))

    run = RunManifest("evaluate", cfg.config_hash(), ids, seeds={"eval": e["seed"], "attack": [s1, s2]},
                      outputs=outputs, timing={"seconds": round(time.time() - t0, 3)})
    run.write(cfg.workdir, "evaluate")
    return {
        "report_hashes": hashes,
        "asr": {r.model_id: r.asr for r in reports},
        "quality": {k: {"psnr": v.psnr, "ssim": v.ssim} for k, v in agg.items()},
        "outputs": outputs,
    }


def _trace_table(trace: np.ndarray) -> str:
    """``iteration,sample,loss`` rows for every sample of a batched attack."""
    lines = ["iteration,sample,loss"]
    for it, row in enumerate(trace):
        lines += [f"{it},{j},{float(v):.8f}" for j, v in enumerate(row)]
    return "\n".join(lines) + "\n"
