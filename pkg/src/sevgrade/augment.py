"""Stochastic data augmentation for self-supervised patch training.

Weak global transforms go on the anchor image, strong ones on its pair, and
the pair's transform determines a per-patch ground-truth map: all zeros for
identity, all ones for global transforms, and for CutPaste the patches whose
receptive field overlaps the pasted rectangle.
"""
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from sevgrade.errors import ConfigError, GeometryError

T_NORM_NAMES = ("identity", "jitter", "sharpness", "brightness")
T_ANOM_NAMES = ("identity", "crop_resize", "cutpaste", "posterise", "rotate")
GLOBAL_ANOM = ("crop_resize", "rotate", "posterise")

WHOLE = "whole-image"


@dataclass(frozen=True)
class Rect:
    """Half-open pixel rectangle: rows r0..r1-1, cols c0..c1-1."""

    r0: int
    c0: int
    r1: int
    c1: int

    @property
    def area(self):
        return max(0, self.r1 - self.r0) * max(0, self.c1 - self.c0)

    def as_tuple(self):
        return (self.r0, self.c0, self.r1, self.c1)


Region = Union[None, str, Rect]


@dataclass(frozen=True)
class TransformSpec:
    name: str
    params: tuple = ()  # sorted (key, value) pairs; empty for identity

    def __post_init__(self):
        if self.name == "identity" and self.params:
            raise ValueError("identity takes no parameters")

    def param(self, key):
        return dict(self.params)[key]


@dataclass
class AugmentedPair:
    x_i_image: np.ndarray
    x_j_image: np.ndarray
    applied_i: TransformSpec
    applied_j: TransformSpec
    affected_region: Region


@dataclass
class SDAConfig:
    t_norm: tuple = T_NORM_NAMES
    t_anom: tuple = ("identity", "crop_resize", "cutpaste")
    # per-name selection weights; uniform over the listed set when empty
    t_norm_weights: dict = field(default_factory=dict)
    t_anom_weights: dict = field(default_factory=dict)
    jitter_strength: float = 0.1
    sharpness_strength: float = 0.1
    brightness_strength: float = 0.1
    crop_fraction: tuple = (0.6, 0.9)
    cutpaste_area: tuple = (0.02, 0.15)
    cutpaste_aspect: tuple = (0.3, 3.3)
    posterise_bits: int = 2
    rotate_degrees: tuple = (90.0, 270.0)

    def validate(self):
        if not self.t_anom:
            raise ConfigError("SDA t_anom must list at least one transform")
        if not self.t_norm:
            raise ConfigError("SDA t_norm must list at least one transform")
        for name in self.t_norm:
            if name not in T_NORM_NAMES:
                raise ConfigError(f"{name!r} is not a weak transform {T_NORM_NAMES}")
        for name in self.t_anom:
            if name not in T_ANOM_NAMES:
                raise ConfigError(f"{name!r} is not a strong transform {T_ANOM_NAMES}")
        return self


def _choose(names, weights, rng):
    w = np.array([float(weights.get(n, 1.0)) for n in names])
    if w.sum() <= 0:
        raise ConfigError(f"selection weights for {names} sum to zero")
    return names[int(rng.choice(len(names), p=w / w.sum()))]


def _blur3(img):
    # torchvision-style smoothing kernel for sharpness adjustment
    k = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0
    out = ndimage.convolve(img.astype(np.float64), k, mode="nearest")
    out[0, :], out[-1, :], out[:, 0], out[:, -1] = img[0, :], img[-1, :], img[:, 0], img[:, -1]
    return out


def _resize(img, side):
    return np.asarray(Image.fromarray(img.astype(np.float32), mode="F").resize((side, side), Image.BILINEAR))


def _draw_rect(side, area_range, aspect_range, rng):
    while True:
        area = rng.uniform(*area_range) * side * side
        log_ar = rng.uniform(math.log(aspect_range[0]), math.log(aspect_range[1]))
        aspect = math.exp(log_ar)
        h = int(round(math.sqrt(area * aspect)))
        w = int(round(math.sqrt(area / aspect)))
        if 0 < h < side and 0 < w < side:
            return h, w


def weak_transform(img, name, cfg: SDAConfig, rng):
    if name == "identity":
        return img.copy(), TransformSpec("identity")
    if name == "jitter":
        f = 1.0 + rng.uniform(-cfg.jitter_strength, cfg.jitter_strength)
        mean = float(img.mean())
        out = mean + f * (img - mean)
    elif name == "sharpness":
        f = 1.0 + rng.uniform(-cfg.sharpness_strength, cfg.sharpness_strength)
        blurred = _blur3(img)
        out = blurred + f * (img - blurred)
    elif name == "brightness":
        f = 1.0 + rng.uniform(-cfg.brightness_strength, cfg.brightness_strength)
        out = img * f
    else:
        raise ConfigError(f"unknown weak transform {name!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32), TransformSpec(name, (("factor", float(f)),))


def strong_transform(img, name, cfg: SDAConfig, rng):
    """Apply one strong transform; returns (image, spec, affected_region)."""
    side = img.shape[0]
    if name == "identity":
        return img.copy(), TransformSpec("identity"), None
    if name == "crop_resize":
        frac = rng.uniform(*cfg.crop_fraction)
        c = max(1, int(round(frac * side)))
        r0 = int(rng.integers(0, side - c + 1))
        c0 = int(rng.integers(0, side - c + 1))
        out = _resize(img[r0:r0 + c, c0:c0 + c], side)
        spec = TransformSpec(name, (("crop", (r0, c0, r0 + c, c0 + c)),))
        return np.clip(out, 0.0, 1.0).astype(np.float32), spec, WHOLE
    if name == "cutpaste":
        h, w = _draw_rect(side, cfg.cutpaste_area, cfg.cutpaste_aspect, rng)
        sr, sc = int(rng.integers(0, side - h + 1)), int(rng.integers(0, side - w + 1))
        dr, dc = int(rng.integers(0, side - h + 1)), int(rng.integers(0, side - w + 1))
        out = img.copy()
        out[dr:dr + h, dc:dc + w] = img[sr:sr + h, sc:sc + w]
        dst = Rect(dr, dc, dr + h, dc + w)
        spec = TransformSpec(name, (("destination", dst.as_tuple()), ("source", (sr, sc, sr + h, sc + w))))
        return out, spec, dst
    if name == "posterise":
        shift = 8 - cfg.posterise_bits
        q = (np.clip(np.round(img * 255), 0, 255).astype(np.uint8) >> shift) << shift
        return (q.astype(np.float32) / 255.0), TransformSpec(name, (("bits", cfg.posterise_bits),)), WHOLE
    if name == "rotate":
        lo, hi = cfg.rotate_degrees
        angle = float(rng.uniform(lo, hi))
        if angle == lo:
            angle = (lo + hi) / 2
        out = Image.fromarray(img.astype(np.float32), mode="F").rotate(angle, resample=Image.BILINEAR)
        return np.clip(np.asarray(out), 0, 1).astype(np.float32), TransformSpec(name, (("degrees", angle),)), WHOLE
    raise ConfigError(f"unknown strong transform {name!r}")


def apply_sda(x_i, x_j, config: SDAConfig, rng) -> AugmentedPair:
    config.validate()
    x_i = np.asarray(x_i, dtype=np.float32)
    x_j = np.asarray(x_j, dtype=np.float32)
    if x_i.shape != x_j.shape or x_i.ndim != 2 or x_i.shape[0] != x_i.shape[1]:
        raise GeometryError(f"expected equal square images, got {x_i.shape} and {x_j.shape}")
    norm_name = _choose(tuple(config.t_norm), config.t_norm_weights, rng)
    anom_name = _choose(tuple(config.t_anom), config.t_anom_weights, rng)
    img_i, spec_i = weak_transform(x_i, norm_name, config, rng)
    img_j, spec_j, region = strong_transform(x_j, anom_name, config, rng)
    return AugmentedPair(img_i, img_j, spec_i, spec_j, region)


def patch_label_map(affected_region: Region, geometry, window: int) -> np.ndarray:
    """Binary (P, P) map: 1 where a patch's receptive field saw the change.

    ``geometry`` supplies ``input_side``, ``patch_side(window)`` and
    ``window_field(start, window)``; a patch's field is the union of the
    fields of the feature cells in its window.
    """
    p = geometry.patch_side(window)
    if p < 1:
        raise GeometryError(f"window {window} larger than feature map")
    if affected_region is None:
        return np.zeros((p, p), dtype=np.uint8)
    if affected_region == WHOLE:
        return np.ones((p, p), dtype=np.uint8)
    if not isinstance(affected_region, Rect):
        raise GeometryError(f"unrecognised region {affected_region!r}")
    r = affected_region
    side = geometry.input_side
    if not (0 <= r.r0 < r.r1 <= side and 0 <= r.c0 < r.c1 <= side):
        raise GeometryError(f"rectangle {r.as_tuple()} outside a {side}x{side} image")
    spans = [geometry.window_field(z, window) for z in range(p)]
    rows = np.array([lo <= r.r1 - 1 and hi >= r.r0 for lo, hi in spans])
    cols = np.array([lo <= r.c1 - 1 and hi >= r.c0 for lo, hi in spans])
    return np.outer(rows, cols).astype(np.uint8)
