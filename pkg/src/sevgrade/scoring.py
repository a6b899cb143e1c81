"""Anomaly and severity scores built on cosine distances to learned centres."""
import csv
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from sevgrade.encoder import PatchEmbeddingMap, cosine_distance_rows, encode_batch
from sevgrade.errors import ConfigError, GeometryError, ManifestError

LOGGER = logging.getLogger(__name__)

SCORE_COLUMNS = ("sample_id", "s_ssl", "s_sev", "s_oa", "s_comb", "vote_count")


@dataclass
class ScoreReport:
    sample_id: str
    s_ssl: Optional[float] = None
    s_sev: Optional[float] = None
    s_oa: Optional[float] = None
    s_comb: Optional[float] = None
    votes: Optional[list] = None

    def __post_init__(self):
        if self.s_comb is not None and (self.s_sev is None or self.s_oa is None):
            raise ValueError("s_comb requires s_sev and s_oa")

    @property
    def vote_count(self):
        return None if self.votes is None else int(sum(self.votes))


def ssl_score_from_embedding(patches, c_norm) -> float:
    """Mean cosine distance of every patch vector to the normal centre."""
    if isinstance(patches, PatchEmbeddingMap):
        patches = patches.grid
    patches = np.asarray(patches, dtype=np.float64)
    c_norm = np.asarray(c_norm, dtype=np.float64)
    if patches.shape[-1] != c_norm.shape[-1]:
        raise GeometryError(f"embedding dim {patches.shape[-1]} != centre dim {c_norm.shape[-1]}")
    return float(np.mean(cosine_distance_rows(patches.reshape(-1, patches.shape[-1]), c_norm)))


def dcrl_score_from_embedding(emb, c_norm, c_anom) -> float:
    """|d(emb, C_norm) - d(emb, C_anom)| with cosine distances."""
    if c_anom is None:
        raise ConfigError("stage has no anomalous centre; was it trained in dcrl mode?")
    emb = np.asarray(emb, dtype=np.float64)
    if emb.shape[-1] != np.shape(c_norm)[-1]:
        raise GeometryError("embedding and centre dimensions differ")
    d1 = cosine_distance_rows(emb, c_norm)
    d2 = cosine_distance_rows(emb, c_anom)
    return float(abs(d1 - d2))


def combine(s_sev: float, s_oa: float, t: float, clamp_oa: bool = False) -> float:
    """Piecewise combination: 1 + s_sev above the threshold, else the OA score.

    With non-negative (post-ReLU) embeddings every cosine distance lies in
    [0, 1], so the OA branch already stays at or below 1.  ``clamp_oa``
    enforces that for arbitrary embeddings.
    """
    if t < 0:
        raise ConfigError("threshold t must be >= 0")
    if s_sev > t:
        return 1.0 + s_sev
    if clamp_oa and not 0.0 <= s_oa <= 1.0:
        LOGGER.info("clamping s_oa=%.6f into [0, 1]", s_oa)
        s_oa = min(max(s_oa, 0.0), 1.0)
    return s_oa


def _embed(images, stage):
    if len(images) == 0:
        return np.zeros((0, len(stage.c_norm)))
    return encode_batch(list(images), stage.encoder)


def score_ssl(images, stage) -> np.ndarray:
    """Stage-1 score for each image in ``images``."""
    if stage.mode != "ssl" or not stage.encoder_config.patch_mode:
        raise ConfigError("score_ssl needs a patch-mode stage-1 member")
    return np.array([ssl_score_from_embedding(e, stage.c_norm) for e in _embed(images, stage)])


def score_dcrl(images, stage) -> np.ndarray:
    if stage.c_anom is None:
        raise ConfigError("score_dcrl needs a stage with both centres")
    return np.array([dcrl_score_from_embedding(e, stage.c_norm, stage.c_anom)
                     for e in _embed(images, stage)])


def score_combined(images, sev, oa, t: float) -> np.ndarray:
    s_sev = score_dcrl(images, sev)
    s_oa = score_dcrl(images, oa)
    return np.array([combine(a, b, t) for a, b in zip(s_sev, s_oa)])


def votes_from_scores(scores, cd_maxes, m: float) -> np.ndarray:
    """(n, K) boolean votes: member k flags x when its score > m * cd_max_k."""
    if m < 1:
        raise ConfigError(f"margin m={m} must be >= 1")
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    cd_maxes = np.asarray(cd_maxes, dtype=np.float64)
    if scores.shape[1] == 0:
        raise ConfigError("voting needs at least one member")
    if scores.shape[1] != len(cd_maxes):
        raise ConfigError("one cd_max per member required")
    return scores > m * cd_maxes[None, :]


def vote_anomaly(scores, cd_maxes, m: float):
    """Ensemble vote for one sample from its per-member scores.

    Returns ``(is_anomaly, votes)``; anomalous only if every member agrees.
    """
    votes = votes_from_scores(np.asarray(scores, dtype=np.float64)[None, :], cd_maxes, m)[0]
    return bool(votes.all()), [bool(v) for v in votes]


def member_score_matrix(images, members) -> np.ndarray:
    """(n, K) scores of each image under each member, using each member's own score."""
    if not members:
        raise ConfigError("voting needs at least one member")
    cols = [score_ssl(images, st) if st.mode == "ssl" else score_dcrl(images, st) for st in members]
    return np.stack(cols, axis=1)


def balanced_margin(scores, cd_maxes, target_count: int) -> float:
    """Margin m >= 1 that flags the ``target_count`` most anomalous samples.

    A sample is flagged for every m below min_k(score_k / cd_max_k); picking
    m at the (target_count+1)-th largest such ratio flags the top
    ``target_count``.  Never returns below 1.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    cd_maxes = np.maximum(np.asarray(cd_maxes, dtype=np.float64), 1e-12)
    ratios = np.sort((scores / cd_maxes[None, :]).min(axis=1))[::-1]
    if target_count <= 0:
        return max(1.0, float(ratios[0]) if len(ratios) else 1.0)
    if target_count >= len(ratios):
        return 1.0
    m = max(1.0, float(ratios[target_count]))
    # score / cd_max == m can still pass score > m * cd_max after rounding
    for _ in range(64):
        if votes_from_scores(scores, cd_maxes, m).all(axis=1).sum() <= target_count:
            break
        m = float(np.nextafter(m, np.inf))
    return m


def nearest_rank_percentile(values, q: float) -> float:
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest value."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        raise ConfigError("percentile of an empty collection")
    if not 0 < q <= 100:
        raise ConfigError(f"percentile q={q} outside (0, 100]")
    rank = max(1, math.ceil(q / 100.0 * values.size - 1e-9))
    return float(values[rank - 1])


def calibrate_threshold_t(sev, normal_images, q: float = 95.0) -> float:
    """Threshold t: percentile of the severe detector's scores on its training normals."""
    if len(normal_images) == 0:
        raise ConfigError("threshold calibration needs training normals")
    return nearest_rank_percentile(score_dcrl(normal_images, sev), q)


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.10g}" if isinstance(v, float) else str(v)


def write_scores(reports, path, metadata: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        for key in sorted(metadata):
            fh.write(f"# {key}={metadata[key]}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_COLUMNS)
        for r in reports:
            writer.writerow([r.sample_id, _fmt(r.s_ssl), _fmt(r.s_sev), _fmt(r.s_oa),
                             _fmt(r.s_comb), _fmt(r.vote_count)])
    os.replace(tmp, path)
    return path


def read_scores(path):
    """Returns (metadata dict, list of row dicts with floats or None)."""
    meta, body = {}, []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#") and not body:
                k, _, v = line[1:].strip().partition("=")
                meta[k.strip()] = v.strip()
            elif line.strip():
                body.append(line)
    rows = []
    seen = set()
    for i, row in enumerate(csv.DictReader(body), start=1):
        sid = row["sample_id"]
        if sid in seen:
            raise ManifestError(f"duplicate sample_id {sid!r} in score file", row=i)
        seen.add(sid)
        rows.append({k: (row[k] if k == "sample_id" else (float(row[k]) if row[k] else None))
                     for k in row})
    return meta, rows
