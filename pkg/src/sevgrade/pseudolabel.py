"""Pseudo-anomaly labels from ensemble votes, filtered by image-text similarity.

Knee radiographs carry anomalies unrelated to disease (screws, implants).
Candidates whose similarity to a describing statement exceeds a percentile of
the labelled normals' similarities are dropped from the pseudo labels.  This
only happens at training time; scoring never consults a provider.
"""
import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from sevgrade.dataset import COLUMNS
from sevgrade.errors import ConfigError, LeakageError, ProviderError
from sevgrade.scoring import nearest_rank_percentile, votes_from_scores

LOGGER = logging.getLogger(__name__)

DEFAULT_STATEMENT = "there is a screw present in the image"
CLIP_MODEL_ENV = "SEVGRADE_CLIP_MODEL"
DEFAULT_CLIP_MODEL = "openai/clip-vit-base-patch32"


class SimilarityProvider(Protocol):
    provider_id: str

    def similarities(self, samples, images, statement: str) -> np.ndarray:
        """One similarity per sample, deterministic for fixed inputs."""


@dataclass
class TableProvider:
    """Keyed lookup table, for tests and precomputed similarities."""

    table: dict = field(default_factory=dict)
    default: float = 0.0
    provider_id: str = "table"

    def similarities(self, samples, images, statement):
        return np.array([float(self.table.get(s.sample_id, self.default)) for s in samples])


@dataclass
class SaturationProvider:
    """Fraction of near-white pixels; flags metal-like artefacts without a model.

    Ignores the statement.  Intended for the synthetic corpus, whose implant
    artefacts are saturated bars.
    """

    level: float = 0.98
    provider_id: str = "saturation"

    def similarities(self, samples, images, statement):
        return np.array([float(np.mean(images[s] >= self.level)) for s in samples])


class ClipProvider:
    """Cosine similarity between CLIP image and text embeddings.

    The model is read from ``model_path`` or the ``SEVGRADE_CLIP_MODEL``
    environment variable, from local files only unless ``allow_download``.
    """

    def __init__(self, model_path=None, allow_download=False, batch_size=16):
        self.model_path = model_path or os.environ.get(CLIP_MODEL_ENV, DEFAULT_CLIP_MODEL)
        self.allow_download = allow_download
        self.batch_size = batch_size
        self.provider_id = f"clip:{self.model_path}"
        self._model = None

    def _load(self):
        if self._model is None:
            try:
                from transformers import CLIPModel, CLIPProcessor

                kw = {"local_files_only": not self.allow_download}
                self._model = CLIPModel.from_pretrained(self.model_path, **kw).eval()
                self._processor = CLIPProcessor.from_pretrained(self.model_path, **kw)
            except Exception as exc:  # any load failure is reported uniformly
                raise ProviderError(f"cannot load CLIP model {self.model_path!r}: {exc}") from exc
        return self._model, self._processor

    def similarities(self, samples, images, statement):
        import torch
        from PIL import Image

        model, processor = self._load()
        out = []
        with torch.no_grad():
            text = processor(text=[statement], return_tensors="pt", padding=True)
            t = model.get_text_features(**text)
            t = t / t.norm(dim=-1, keepdim=True)
            for start in range(0, len(samples), self.batch_size):
                batch = [Image.fromarray(np.uint8(np.round(images[s] * 255))).convert("RGB")
                         for s in samples[start:start + self.batch_size]]
                pix = processor(images=batch, return_tensors="pt")
                v = model.get_image_features(**pix)
                v = v / v.norm(dim=-1, keepdim=True)
                out.append((v @ t.T).squeeze(1).double().numpy())
        return np.concatenate(out) if out else np.zeros(0)


def statement_hash(statement: str) -> str:
    return hashlib.sha256(statement.encode("utf-8")).hexdigest()[:16]


class CachedProvider:
    """Wraps a provider with an append-only on-disk similarity cache.

    Rows are ``sample_id,statement_hash,similarity``; on reload the last row
    for a key wins.
    """

    def __init__(self, inner, path):
        self.inner = inner
        self.path = Path(path)
        self.provider_id = inner.provider_id
        self._cache = {}
        if self.path.exists():
            with open(self.path, newline="") as fh:
                for row in csv.DictReader(fh):
                    self._cache[(row["sample_id"], row["statement_hash"])] = float(row["similarity"])

    def similarities(self, samples, images, statement):
        h = statement_hash(statement)
        missing = [s for s in samples if (s.sample_id, h) not in self._cache]
        if missing:
            values = self.inner.similarities(missing, images, statement)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            new_file = not self.path.exists()
            with open(self.path, "a", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                if new_file:
                    writer.writerow(["sample_id", "statement_hash", "similarity"])
                for s, v in zip(missing, values):
                    self._cache[(s.sample_id, h)] = float(v)
                    writer.writerow([s.sample_id, h, repr(float(v))])
        return np.array([self._cache[(s.sample_id, h)] for s in samples])


def make_provider(name: str, cache_path=None, **kwargs):
    if name == "saturation":
        provider = SaturationProvider(**kwargs)
    elif name == "clip":
        provider = ClipProvider(**kwargs)
    elif name == "table":
        provider = TableProvider(**kwargs)
    else:
        raise ConfigError(f"unknown similarity provider {name!r}")
    return CachedProvider(provider, cache_path) if cache_path else provider


@dataclass
class PseudoLabelSet:
    accepted: list
    rejected_by_denoise: list
    m_used: float
    statement: str
    cutoff: float
    provider_id: str = ""

    def __post_init__(self):
        if set(self.accepted) & set(self.rejected_by_denoise):
            raise ValueError("accepted and rejected ids overlap")


def pseudo_label(unlabelled, member_scores, cd_maxes, m: float, train_ids) -> list:
    """Ids of ``unlabelled`` samples flagged by every ensemble member.

    ``member_scores`` is (n, K), one column per member.
    """
    overlap = {s.sample_id for s in unlabelled} & set(train_ids)
    if overlap:
        raise LeakageError(f"{len(overlap)} unlabelled samples were used for training, "
                           f"e.g. {sorted(overlap)[:3]}")
    if len(unlabelled) == 0:
        return []
    votes = votes_from_scores(member_scores, cd_maxes, m)
    return [s.sample_id for s, v in zip(unlabelled, votes) if v.all()]


def denoise(candidates, provider, statement: str, train_normals, images, q: float = 95.0,
            m_used: float = float("nan")) -> PseudoLabelSet:
    """Drop candidates more similar to ``statement`` than the q-th percentile of normals."""
    if not train_normals:
        raise ConfigError("denoising needs labelled normals for the cutoff")
    try:
        ref = provider.similarities(list(train_normals), images, statement)
        sims = provider.similarities(list(candidates), images, statement) if candidates else np.zeros(0)
    except ProviderError:
        raise
    except Exception as exc:
        raise ProviderError(f"similarity provider {provider.provider_id} failed: {exc}") from exc
    cutoff = nearest_rank_percentile(ref, q)
    accepted = [s.sample_id for s, v in zip(candidates, sims) if not v > cutoff]
    rejected = [s.sample_id for s, v in zip(candidates, sims) if v > cutoff]
    if candidates and not accepted:
        LOGGER.warning("denoising rejected all %d candidates", len(candidates))
    return PseudoLabelSet(accepted=accepted, rejected_by_denoise=rejected, m_used=m_used,
                          statement=statement, cutoff=cutoff, provider_id=provider.provider_id)


def no_denoise(candidates, m_used: float = float("nan")) -> PseudoLabelSet:
    return PseudoLabelSet(accepted=[s.sample_id for s in candidates], rejected_by_denoise=[],
                          m_used=m_used, statement="", cutoff=float("nan"), provider_id="none")


def write_pseudo_labels(label_set: PseudoLabelSet, by_id: dict, path) -> Path:
    """Manifest-compatible file of accepted samples with pseudo_label=1.

    Grade columns are left empty: the samples are unlabelled.  The full set,
    rejections included, goes to a json sidecar.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(f"# m={label_set.m_used!r}\n# cutoff={label_set.cutoff!r}\n")
        fh.write(f"# provider={label_set.provider_id}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS + ("pseudo_label",))
        for sid in label_set.accepted:
            s = by_id[sid]
            writer.writerow([s.image_ref, s.patient_id, s.knee_side, s.split] + [""] * 7 + ["1"])
    os.replace(tmp, path)
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(asdict(label_set), fh, indent=2, sort_keys=True)
    return path


def read_pseudo_labels(path) -> PseudoLabelSet:
    with open(Path(path).with_suffix(".json")) as fh:
        return PseudoLabelSet(**json.load(fh))
