"""Contrastive pair training for the patch-level (ssl) and dual-centre (dcrl) stages."""
import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from sevgrade.augment import SDAConfig, apply_sda, patch_label_map
from sevgrade.encoder import Encoder, EncoderConfig, cosine_distance_rows, encode_batch
from sevgrade.errors import ConfigError, GeometryError, MissingStageError, TrainingError

LOGGER = logging.getLogger(__name__)

BCE_EPS = 1e-7


@dataclass
class PlateauConfig:
    window_epochs: int = 5
    rel_tol: float = 1e-3


@dataclass
class TrainConfig:
    mode: str = "ssl"
    N: int = 30
    K: int = 10
    lr: float = 1e-6
    weight_decay: float = 0.1
    batch_size: int = 1
    max_epochs: int = 100
    plateau: PlateauConfig = field(default_factory=PlateauConfig)
    early_stopping: bool = True
    rng_seed: int = 0

    def validate(self):
        if self.mode not in ("ssl", "dcrl"):
            raise ConfigError(f"mode must be ssl or dcrl, got {self.mode!r}")
        if self.batch_size != 1:
            raise ConfigError("only batch_size=1 is supported")
        if self.N < 1 or self.K < 1 or self.max_epochs < 1:
            raise ConfigError("N, K and max_epochs must be positive")
        return self


@dataclass
class TrainedStage:
    encoder: Encoder
    c_norm: np.ndarray
    c_anom: Optional[np.ndarray]
    cd_max: float
    train_ids: list
    loss_curve: list
    mode: str
    anom_ids: list = field(default_factory=list)
    monitor_curve: list = field(default_factory=list)
    seed: int = 0
    stopped_early: bool = False

    @property
    def encoder_config(self) -> EncoderConfig:
        return self.encoder.config

    @property
    def centre_distance(self) -> Optional[float]:
        if self.c_anom is None:
            return None
        return float(cosine_distance_rows(self.c_norm, self.c_anom))


def bce_loss(pred, target, eps: float = BCE_EPS):
    """Mean binary cross entropy with predictions clamped to [eps, 1-eps].

    Cosine distances live in [0, 2]; the clamp keeps log(1 - pred) defined.
    """
    p = pred.clamp(eps, 1.0 - eps)
    y = target.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def pair_loss(emb_i, emb_j, labels):
    """Loss and predictions for one pair at matching coordinates."""
    pred = cosine_distance_rows(emb_i, emb_j)
    labels = torch.as_tensor(np.asarray(labels), dtype=pred.dtype)
    return bce_loss(pred, labels), pred


def plateau_reached(history, window: int, rel_tol: float, mode: str = "min") -> bool:
    """True once the last ``window`` values improve on the earlier best by < rel_tol."""
    if len(history) <= window:
        return False
    before, recent = history[:-window], history[-window:]
    if mode == "min":
        ref, best = min(before), min(recent)
        gain = ref - best
    else:
        ref, best = max(before), max(recent)
        gain = best - ref
    return gain / max(abs(ref), 1e-12) < rel_tol


def compute_centre(embeddings) -> np.ndarray:
    """Mean of every embedding vector, flattening samples and patch grids."""
    if isinstance(embeddings, (list, tuple)):
        if not embeddings:
            raise GeometryError("cannot compute a centre of nothing")
        embeddings = np.stack([np.asarray(e, dtype=np.float64) for e in embeddings])
    arr = np.asarray(embeddings, dtype=np.float64)
    if arr.size == 0:
        raise GeometryError("cannot compute a centre of nothing")
    return arr.reshape(-1, arr.shape[-1]).mean(axis=0)


def pair_distance(a, b) -> float:
    """Cosine distance of two vectors, or mean per-coordinate distance of two patch maps."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise GeometryError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(cosine_distance_rows(a, b)))


def compute_cd_max(embeddings) -> float:
    """Largest pair distance among a member's training embeddings."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = len(embeddings)
    if n < 2:
        raise GeometryError("cd_max needs at least two training samples")
    flat = embeddings.reshape(n, -1, embeddings.shape[-1])
    unit = flat / np.maximum(np.linalg.norm(flat, axis=-1, keepdims=True), 1e-12)
    best = 0.0
    for i in range(n - 1):
        # mean over coordinates of 1 - cos, vectorised over partners j > i
        d = 1.0 - np.einsum("pc,jpc->jp", unit[i], unit[i + 1:]).mean(axis=1)
        best = max(best, float(d.max()))
    return best


def _check_finite(loss, **snapshot):
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()}", snapshot=snapshot)


def _member_seeds(seed, k):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(k)]


def _optimiser(encoder, cfg):
    return torch.optim.Adam(encoder.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def train_ssl_member(samples, images, cfg: TrainConfig, enc: EncoderConfig,
                     sda: SDAConfig, seed: int) -> TrainedStage:
    """Train one patch-level member on ``samples`` (already the N-subset)."""
    if len(samples) < 2:
        raise ConfigError("ssl training needs at least two samples")
    if not enc.patch_mode:
        raise ConfigError("ssl training runs in patch mode")
    sda.validate()
    rng = np.random.default_rng(seed)
    encoder = Encoder(enc, seed=seed)
    encoder.train()
    opt = _optimiser(encoder, cfg)
    imgs = [images[s] for s in samples]
    n = len(imgs)
    loss_curve = []
    stopped = False
    for epoch in range(cfg.max_epochs):
        losses = []
        for i in rng.permutation(n):
            j = int(rng.integers(0, n - 1))
            j = j + 1 if j >= i else j
            pair = apply_sda(imgs[i], imgs[j], sda, rng)
            labels = patch_label_map(pair.affected_region, encoder.geometry, enc.window)
            emb = encoder(encoder.prepare(np.stack([pair.x_i_image, pair.x_j_image])))
            loss, _ = pair_loss(emb[0], emb[1], labels)
            _check_finite(loss, epoch=epoch, anchor=samples[i].sample_id,
                          pair=samples[j].sample_id, transform=pair.applied_j.name)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        loss_curve.append(float(np.mean(losses)))
        LOGGER.debug("ssl seed=%d epoch=%d loss=%.6f", seed, epoch + 1, loss_curve[-1])
        if cfg.early_stopping and plateau_reached(loss_curve, cfg.plateau.window_epochs,
                                                  cfg.plateau.rel_tol, "min"):
            stopped = True
            break

    emb = encode_batch(imgs, encoder)
    return TrainedStage(encoder=encoder, c_norm=compute_centre(emb), c_anom=None,
                        cd_max=compute_cd_max(emb), train_ids=[s.sample_id for s in samples],
                        loss_curve=loss_curve, mode="ssl", seed=seed, stopped_early=stopped)


def train_ssl_ensemble(pool, images, cfg: TrainConfig, enc: EncoderConfig, sda: SDAConfig,
                       on_member: Optional[Callable] = None) -> list:
    """K independently seeded members, each on its own N-subset of ``pool``."""
    cfg.validate()
    if len(pool) < cfg.N:
        raise ConfigError(f"pool has {len(pool)} samples, N={cfg.N}")
    members = []
    for k, seed in enumerate(_member_seeds(cfg.rng_seed, cfg.K)):
        rng = np.random.default_rng(seed)
        subset = [pool[i] for i in np.sort(rng.choice(len(pool), size=cfg.N, replace=False))]
        stage = train_ssl_member(subset, images, cfg, enc, sda, seed)
        LOGGER.info("stage1 member %d: %d epochs, final loss %.4f, cd_max %.4f",
                    k, len(stage.loss_curve), stage.loss_curve[-1], stage.cd_max)
        if on_member is not None:
            on_member(k, stage)
        members.append(stage)
    return members


def _dcrl_centres(encoder, normal_imgs, anom_imgs):
    e_norm = encode_batch(normal_imgs, encoder)
    e_anom = encode_batch(anom_imgs, encoder)
    return e_norm, compute_centre(e_norm), compute_centre(e_anom)


def train_dcrl(normals, pseudo_anoms, images, cfg: TrainConfig, enc: EncoderConfig, seed: int,
               epoch_callback: Optional[Callable] = None) -> TrainedStage:
    """Dual-centre training on whole-image embeddings.

    Anchors come from ``normals``; the partner is drawn from normals plus
    pseudo anomalies (never the anchor itself) with target 1 for a pseudo
    anomaly and 0 otherwise.  The monitored quantity is the cosine distance
    between the two centres, recomputed after every epoch.
    """
    cfg.validate()
    if not pseudo_anoms:
        raise ConfigError("dcrl training needs at least one pseudo anomaly")
    if not normals:
        raise ConfigError("dcrl training needs normal samples")
    if enc.patch_mode:
        raise ConfigError("dcrl training uses whole-image embeddings (patch_mode=false)")
    rng = np.random.default_rng(seed)
    encoder = Encoder(enc, seed=seed)
    encoder.train()
    opt = _optimiser(encoder, cfg)
    normal_imgs = [images[s] for s in normals]
    anom_imgs = [images[s] for s in pseudo_anoms]
    partners = normal_imgs + anom_imgs
    n, total = len(normal_imgs), len(partners)
    if total < 2:
        raise ConfigError("dcrl training needs at least two samples")

    loss_curve, monitor = [], []
    stopped = False
    for epoch in range(cfg.max_epochs):
        losses = []
        for i in rng.permutation(n):
            j = int(rng.integers(0, total - 1))
            j = j + 1 if j >= i else j
            y = 1.0 if j >= n else 0.0
            emb = encoder(encoder.prepare(np.stack([normal_imgs[i], partners[j]])))
            loss, _ = pair_loss(emb[0], emb[1], np.array(y))
            _check_finite(loss, epoch=epoch, anchor=normals[i].sample_id, target=y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        loss_curve.append(float(np.mean(losses)))
        _, c_norm, c_anom = _dcrl_centres(encoder, normal_imgs, anom_imgs)
        monitor.append(float(cosine_distance_rows(c_norm, c_anom)))
        LOGGER.debug("dcrl seed=%d epoch=%d loss=%.6f centre_cd=%.6f",
                      seed, epoch + 1, loss_curve[-1], monitor[-1])
        if epoch_callback is not None:
            epoch_callback(epoch + 1, encoder, c_norm, c_anom)
        if cfg.early_stopping and plateau_reached(monitor, cfg.plateau.window_epochs,
                                                  cfg.plateau.rel_tol, "max"):
            stopped = True
            break

    e_norm, c_norm, c_anom = _dcrl_centres(encoder, normal_imgs, anom_imgs)
    return TrainedStage(encoder=encoder, c_norm=c_norm, c_anom=c_anom,
                        cd_max=compute_cd_max(e_norm) if n >= 2 else 0.0,
                        train_ids=[s.sample_id for s in normals],
                        anom_ids=[s.sample_id for s in pseudo_anoms],
                        loss_curve=loss_curve, monitor_curve=monitor, mode="dcrl",
                        seed=seed, stopped_early=stopped)


# --------------------------------------------------------------------------
# checkpoints

def save_stage(stage: TrainedStage, directory, metadata: Optional[dict] = None) -> Path:
    """Write a stage checkpoint; the directory appears atomically."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = directory.with_name(directory.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    stage.encoder.save(tmp)
    arrays = {"c_norm": stage.c_norm}
    if stage.c_anom is not None:
        arrays["c_anom"] = stage.c_anom
    np.savez(tmp / "centres.npz", **arrays)
    with open(tmp / "encoder.json", "w") as fh:
        json.dump(stage.encoder_config.to_dict(), fh, indent=2, sort_keys=True)
    meta = {
        "mode": stage.mode,
        "cd_max": stage.cd_max,
        "train_ids": stage.train_ids,
        "anom_ids": stage.anom_ids,
        "loss_curve": stage.loss_curve,
        "monitor_curve": stage.monitor_curve,
        "seed": stage.seed,
        "stopped_early": stage.stopped_early,
        "pretrained_loaded": stage.encoder.pretrained_loaded,
        **(metadata or {}),
    }
    with open(tmp / "stage.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    if directory.exists():
        shutil.rmtree(directory)
    os.replace(tmp, directory)
    return directory


def load_stage(directory) -> TrainedStage:
    directory = Path(directory)
    if not (directory / "stage.json").exists():
        raise MissingStageError(directory.parent.name, directory)
    with open(directory / "encoder.json") as fh:
        enc = EncoderConfig.from_dict(json.load(fh))
    with open(directory / "stage.json") as fh:
        meta = json.load(fh)
    # weights come from the checkpoint, never from a pretrained file
    encoder = Encoder(EncoderConfig(**{**enc.to_dict(), "pretrained": False}), seed=meta["seed"])
    encoder.config = enc
    encoder.load_weights(directory / "weights.pt")
    encoder.pretrained_loaded = meta.get("pretrained_loaded", False)
    encoder.eval()
    centres = np.load(directory / "centres.npz")
    return TrainedStage(encoder=encoder, c_norm=centres["c_norm"],
                        c_anom=centres["c_anom"] if "c_anom" in centres else None,
                        cd_max=meta["cd_max"], train_ids=meta["train_ids"],
                        loss_curve=meta["loss_curve"], mode=meta["mode"],
                        anom_ids=meta.get("anom_ids", []), monitor_curve=meta.get("monitor_curve", []),
                        seed=meta["seed"], stopped_early=meta.get("stopped_early", False))
