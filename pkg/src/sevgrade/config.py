"""Declarative run configuration with built-in ``paper`` and ``desk`` profiles.

A config file is YAML.  Its ``profile`` key picks the base profile and every
other key overrides it section by section.
"""
import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import yaml

from sevgrade.augment import SDAConfig
from sevgrade.dataset import SyntheticSpec
from sevgrade.encoder import EncoderConfig
from sevgrade.errors import ConfigError
from sevgrade.pseudolabel import DEFAULT_STATEMENT
from sevgrade.trainer import PlateauConfig, TrainConfig

Margin = Union[float, str]

PROFILES = {
    "paper": {
        "dataset": {"manifest": None, "synthetic": None, "pool_size": 150},
        "stage1": {
            "encoder": {"backbone_id": "alexnet", "truncate_at_layer": 5, "patch_mode": True,
                        "window": 3, "input_side": 224, "pretrained": True},
            "train": {"mode": "ssl", "N": 30, "K": 10, "lr": 1e-6, "weight_decay": 0.1,
                      "max_epochs": 100, "plateau": {"window_epochs": 5, "rel_tol": 1e-3}},
            "sda": {"t_anom": ["identity", "crop_resize", "cutpaste"]},
        },
        "stage3": {
            "encoder": {"backbone_id": "vgg16", "truncate_at_layer": 13, "patch_mode": False,
                        "window": 1, "input_side": 224, "pretrained": True},
            "train": {"mode": "dcrl", "N": 30, "K": 1, "lr": 1e-6, "weight_decay": 0.1,
                      "max_epochs": 100, "plateau": {"window_epochs": 5, "rel_tol": 1e-3}},
            "n_final": None,
            "iterations": 2,
            "m_oa": 1.184,
            "m_sev": 3.122,
            "t_percentile": 95.0,
        },
        "pseudolabel": {"statement": DEFAULT_STATEMENT, "percentile": 95.0, "provider": "clip",
                        "model_path": None, "cache": True},
        "eval": {"split": "test", "gt3_cutoff": 3},
        "ablation": {"t_anom_sets": [["posterise"], ["rotate"], ["crop_resize"], ["cutpaste"],
                                     ["crop_resize", "cutpaste"]],
                     "trainset_sizes": None, "trainset_member_n": None, "trace_epochs": 30,
                     "gt3_cutoff_t_anom": 2},
        "seeds": [0, 1, 2, 3, 4],
        "output_dir": "runs",
    },
    "desk": {
        "dataset": {"manifest": None,
                    "synthetic": {"n_per_grade": 20, "image_side": 64, "rng_seed": 0},
                    "pool_size": 12},
        "stage1": {
            "encoder": {"backbone_id": "tiny", "truncate_at_layer": 3, "patch_mode": True,
                        "window": 3, "input_side": 64, "pretrained": False},
            "train": {"mode": "ssl", "N": 10, "K": 3, "lr": 3e-5, "weight_decay": 0.1,
                      "max_epochs": 40, "plateau": {"window_epochs": 5, "rel_tol": 1e-3}},
            "sda": {"t_anom": ["identity", "crop_resize", "cutpaste"]},
        },
        "stage3": {
            "encoder": {"backbone_id": "tiny", "truncate_at_layer": 3, "patch_mode": False,
                        "window": 1, "input_side": 64, "pretrained": False},
            "train": {"mode": "dcrl", "N": 10, "K": 1, "lr": 1e-5, "weight_decay": 0.1,
                      "max_epochs": 40, "plateau": {"window_epochs": 5, "rel_tol": 1e-3}},
            "n_final": None,
            "iterations": 2,
            "m_oa": "balanced:30",
            "m_sev": "balanced:5",
            "t_percentile": 95.0,
        },
        "pseudolabel": {"statement": DEFAULT_STATEMENT, "percentile": 95.0,
                        "provider": "saturation", "model_path": None, "cache": True},
        "eval": {"split": "test", "gt3_cutoff": 3},
        "ablation": {"t_anom_sets": [["posterise"], ["rotate"], ["crop_resize"], ["cutpaste"],
                                     ["crop_resize", "cutpaste"]],
                     "trainset_sizes": [4, 8, 12], "trainset_member_n": 4, "trace_epochs": 20,
                     "gt3_cutoff_t_anom": 2},
        "seeds": [0],
        "output_dir": "runs",
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _build(cls, d, where):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        kwargs[k] = tuple(v) if isinstance(v, list) and k not in ("t_anom_sets",) else v
    return cls(**kwargs)


def parse_margin(value, default_target: int):
    """Returns (fixed margin or None, balanced target count or None)."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        if value < 1:
            raise ConfigError(f"margin {value} must be >= 1")
        return float(value), None
    if isinstance(value, str) and value.startswith("balanced"):
        _, _, count = value.partition(":")
        return None, int(count) if count else default_target
    raise ConfigError(f"margin must be a number >= 1 or 'balanced[:count]', got {value!r}")


@dataclass
class Stage1Config:
    encoder: EncoderConfig
    train: TrainConfig
    sda: SDAConfig


@dataclass
class Stage3Config:
    encoder: EncoderConfig
    train: TrainConfig
    n_final: Optional[int]
    iterations: int
    m_oa: Margin
    m_sev: Margin
    t_percentile: float


@dataclass
class RunConfig:
    profile: str
    raw: dict
    stage1: Stage1Config
    stage3: Stage3Config
    dataset: dict = field(default_factory=dict)
    pseudolabel: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    ablation: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])
    output_dir: Path = Path("runs")
    base_dir: Path = Path(".")

    @property
    def pool_size(self) -> int:
        return int(self.dataset["pool_size"])

    def synthetic_spec(self) -> Optional[SyntheticSpec]:
        syn = self.dataset.get("synthetic")
        if not syn:
            return None
        return _build(SyntheticSpec, syn, "dataset.synthetic")

    def manifest_path(self) -> Optional[Path]:
        m = self.dataset.get("manifest")
        if not m:
            return None
        p = Path(m)
        return p if p.is_absolute() else self.base_dir / p

    def n_for_iteration(self, it: int) -> int:
        if it <= 1:
            return self.stage3.train.N
        return int(self.stage3.n_final or self.pool_size)

    def hash(self) -> str:
        """Digest of everything that affects results (output location excluded)."""
        payload = {k: v for k, v in self.raw.items() if k not in ("output_dir", "seeds")}
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()

    def run_id(self, seed: int) -> str:
        return hashlib.sha256(f"{self.hash()}:{seed}".encode()).hexdigest()[:12]

    def with_overrides(self, override: dict) -> "RunConfig":
        return build_config(deep_merge(self.raw, override), self.base_dir)


def _train_config(d, where):
    d = dict(d)
    plateau = PlateauConfig(**d.pop("plateau", {}))
    cfg = _build(TrainConfig, d, where)
    cfg.plateau = plateau
    return cfg.validate()


def build_config(raw: dict, base_dir=".") -> RunConfig:
    profile = raw.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    merged = deep_merge(PROFILES[profile], {k: v for k, v in raw.items() if k != "profile"})
    merged["profile"] = profile
    known = set(PROFILES[profile]) | {"profile"}
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")

    s1 = merged["stage1"]
    stage1 = Stage1Config(encoder=_build(EncoderConfig, s1["encoder"], "stage1.encoder"),
                          train=_train_config(s1["train"], "stage1.train"),
                          sda=_build(SDAConfig, s1.get("sda", {}), "stage1.sda").validate())
    s3 = dict(merged["stage3"])
    stage3 = Stage3Config(encoder=_build(EncoderConfig, s3.pop("encoder"), "stage3.encoder"),
                          train=_train_config(s3.pop("train"), "stage3.train"), **s3)
    if stage1.train.mode != "ssl" or stage3.train.mode != "dcrl":
        raise ConfigError("stage1 trains in ssl mode and stage3 in dcrl mode")
    if not stage1.encoder.patch_mode or stage3.encoder.patch_mode:
        raise ConfigError("stage1 uses patch mode; stage3 uses whole-image embeddings")
    if stage3.iterations < 1:
        raise ConfigError("stage3.iterations must be >= 1")

    m_oa, t_oa = parse_margin(stage3.m_oa, stage3.train.N)
    m_sev, t_sev = parse_margin(stage3.m_sev, stage3.train.N)
    if m_oa is not None and m_sev is not None and m_oa > m_sev:
        raise ConfigError(f"m_oa={m_oa} exceeds m_sev={m_sev}")
    if t_oa is not None and t_sev is not None and t_sev > t_oa:
        raise ConfigError("balanced target for sev must not exceed that for oa")
    if not merged["dataset"].get("manifest") and not merged["dataset"].get("synthetic"):
        raise ConfigError("dataset needs either a manifest path or a synthetic spec")

    base_dir = Path(base_dir)
    out = Path(merged["output_dir"])
    return RunConfig(profile=profile, raw=merged, stage1=stage1, stage3=stage3,
                     dataset=merged["dataset"], pseudolabel=merged["pseudolabel"],
                     eval=merged["eval"], ablation=merged["ablation"],
                     seeds=[int(s) for s in merged["seeds"]],
                     output_dir=out if out.is_absolute() else base_dir / out, base_dir=base_dir)


def load_config(path=None, profile: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    raw, base = {}, Path(".")
    if path is not None:
        path = Path(path)
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        base = path.parent
    if profile is not None:
        raw["profile"] = profile
    if overrides:
        raw = deep_merge(raw, overrides)
    return build_config(raw, base)
