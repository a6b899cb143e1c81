"""Truncated convolutional feature extractors and patch embedding maps."""
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from sevgrade.errors import ConfigError, GeometryError

LOGGER = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
NORM_EPS = 1e-12

# torchvision checkpoint file names, looked up in the torch hub cache
PRETRAINED_FILES = {
    "alexnet": "alexnet-owt-7be5be79.pth",
    "vgg16": "vgg16-397923af.pth",
}


@dataclass(frozen=True)
class EncoderConfig:
    backbone_id: str = "tiny"
    truncate_at_layer: int = 3
    patch_mode: bool = True
    window: int = 3
    input_side: int = 64
    pretrained: bool = True

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _tiny_features():
    return nn.Sequential(
        nn.Conv2d(3, 16, kernel_size=3, stride=2, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(16, 32, kernel_size=3, stride=1, padding=1),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(kernel_size=2, stride=2),
        nn.Conv2d(32, 64, kernel_size=3, stride=1, padding=1),
        nn.ReLU(inplace=True),
    )


def _full_features(backbone_id):
    import torchvision

    if backbone_id == "tiny":
        return _tiny_features()
    if backbone_id == "alexnet":
        return torchvision.models.alexnet(weights=None).features
    if backbone_id == "vgg16":
        return torchvision.models.vgg16(weights=None).features
    raise ConfigError(f"unknown backbone_id {backbone_id!r} (expected tiny, alexnet or vgg16)")


def _truncate(features, n_conv):
    """Keep layers up to and including the ``n_conv``-th conv and its activation."""
    layers = list(features)
    convs = [i for i, m in enumerate(layers) if isinstance(m, nn.Conv2d)]
    if not 1 <= n_conv <= len(convs):
        raise ConfigError(f"truncate_at_layer={n_conv} outside 1..{len(convs)}")
    end = convs[n_conv - 1] + 1
    if end < len(layers) and isinstance(layers[end], nn.ReLU):
        end += 1
    return nn.Sequential(*layers[:end])


def _load_pretrained(features, backbone_id):
    fname = PRETRAINED_FILES.get(backbone_id)
    if fname is None:
        return False
    candidates = []
    if os.environ.get("SEVGRADE_WEIGHTS_DIR"):
        candidates.append(Path(os.environ["SEVGRADE_WEIGHTS_DIR"]) / fname)
    candidates.append(Path(torch.hub.get_dir()) / "checkpoints" / fname)
    for path in candidates:
        if path.exists():
            state = torch.load(path, map_location="cpu", weights_only=True)
            prefix = "features."
            state = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            own = features.state_dict()
            features.load_state_dict({k: state[k] for k in own}, strict=True)
            LOGGER.info("loaded %s weights from %s", backbone_id, path)
            return True
    LOGGER.warning("no pretrained %s weights found (looked in %s); using seeded random init",
                   backbone_id, ", ".join(str(c) for c in candidates))
    return False


@dataclass(frozen=True)
class FeatureGeometry:
    """Spatial mapping between a feature map and the input image.

    Feature index ``i`` along either axis sees input pixels
    ``i * jump - offset`` .. ``i * jump - offset + rf_size - 1``, clipped to
    ``0 .. last_seen``.  ``last_seen`` falls short of the image edge when a
    layer's floor division drops trailing pixels.
    """

    input_side: int
    feature_side: int
    jump: int
    offset: int
    rf_size: int
    last_seen: Optional[int] = None

    def receptive_field(self, i):
        lo = i * self.jump - self.offset
        hi = lo + self.rf_size - 1
        end = self.input_side - 1 if self.last_seen is None else self.last_seen
        return max(lo, 0), min(hi, end)

    def window_field(self, start, window):
        """Input interval covered by feature cells ``start .. start+window-1``."""
        lo, _ = self.receptive_field(start)
        _, hi = self.receptive_field(start + window - 1)
        return lo, hi

    def patch_side(self, window):
        return self.feature_side - window + 1


def _pair(v):
    return v if isinstance(v, tuple) else (v, v)


def feature_geometry(layers, input_side) -> FeatureGeometry:
    """Compose strides, kernels and paddings of ``layers`` analytically."""
    n, jump, offset, rf = input_side, 1, 0, 1
    last_seen = input_side - 1
    for m in layers:
        if isinstance(m, (nn.Conv2d, nn.MaxPool2d, nn.AvgPool2d)):
            k, s, p = (_pair(m.kernel_size)[0], _pair(m.stride)[0], _pair(m.padding)[0])
            d = _pair(getattr(m, "dilation", 1))[0]
            if d != 1 or getattr(m, "ceil_mode", False):
                raise GeometryError(f"unsupported layer {m}")
            if k < s:
                raise GeometryError(f"kernel {k} < stride {s} leaves gaps in the receptive field: {m}")
            n_out = (n + 2 * p - k) // s + 1
            # right padding can point past cells the previous layer never produced
            top = min((n_out - 1) * s - p + k - 1, n - 1)
            last_seen = min(top * jump - offset + rf - 1, last_seen)
            n = n_out
            offset += p * jump
            rf += (k - 1) * jump
            jump *= s
        elif isinstance(m, (nn.ReLU, nn.Dropout, nn.Identity, nn.BatchNorm2d)):
            continue
        else:
            raise GeometryError(f"cannot derive geometry through {type(m).__name__}")
        if n < 1:
            raise GeometryError(f"input side {input_side} too small for this backbone")
    return FeatureGeometry(input_side=input_side, feature_side=n, jump=jump, offset=offset, rf_size=rf,
                           last_seen=last_seen)


@dataclass
class PatchEmbeddingMap:
    grid: np.ndarray  # (P, P, c)
    geometry: FeatureGeometry
    window: int

    @property
    def n_patches(self):
        return self.grid.shape[0] * self.grid.shape[1]


class Encoder(nn.Module):
    """First ``truncate_at_layer`` conv layers of a backbone plus patch pooling."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            full = _full_features(config.backbone_id)
        self.pretrained_loaded = _load_pretrained(full, config.backbone_id) if config.pretrained else False
        self.features = _truncate(full, config.truncate_at_layer)
        self.geometry = feature_geometry(self.features, config.input_side)
        if config.patch_mode and config.window > self.geometry.feature_side:
            raise ConfigError(f"window {config.window} exceeds feature side {self.geometry.feature_side}")
        if config.window < 1:
            raise ConfigError("window must be >= 1")
        self.register_buffer("_mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("_std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def prepare(self, images):
        """(B, H, W) or (H, W) grayscale in [0,1] -> normalised (B, 3, H, W)."""
        x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        if x.dim() == 2:
            x = x.unsqueeze(0)
        if x.shape[-1] != self.config.input_side or x.shape[-2] != self.config.input_side:
            raise ConfigError(f"image side {tuple(x.shape[-2:])} != input_side {self.config.input_side}")
        x = x.unsqueeze(1).expand(-1, 3, -1, -1)
        return (x - self._mean) / self._std

    def feature_map(self, x):
        return self.features(x)

    def forward(self, x):
        """Embeddings: (B, P, P, c) in patch mode, else (B, c)."""
        return embed_feature_map(self.features(x), self.config)

    def save(self, directory):
        directory = Path(directory)
        torch.save(self.features.state_dict(), directory / "weights.pt")

    def load_weights(self, path):
        state = torch.load(path, map_location="cpu", weights_only=True)
        try:
            self.features.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise ConfigError(f"weights at {path} do not match encoder config {self.config}: {exc}") from None


def patch_pool(fmap, window):
    """Average pool every ``window`` x ``window`` block with stride 1.

    ``fmap`` is (B, c, h, w); returns (B, h-window+1, w-window+1, c).
    """
    return F.avg_pool2d(fmap, kernel_size=window, stride=1).permute(0, 2, 3, 1)


def embed_feature_map(fmap, config: EncoderConfig):
    if config.patch_mode:
        return patch_pool(fmap, config.window)
    return fmap.mean(dim=(2, 3))


@torch.no_grad()
def encode(image, encoder: Encoder):
    """Encode one grayscale image; PatchEmbeddingMap or a (c,) vector."""
    was_training = encoder.training
    encoder.eval()
    out = encoder(encoder.prepare(image))[0].double().numpy()
    encoder.train(was_training)
    if not np.all(np.isfinite(out)):
        raise GeometryError("non-finite embedding")
    if encoder.config.patch_mode:
        return PatchEmbeddingMap(grid=out, geometry=encoder.geometry, window=encoder.config.window)
    return out


@torch.no_grad()
def encode_batch(images, encoder: Encoder, batch_size: int = 16) -> np.ndarray:
    """Encode many images; stacked float64 array of embeddings."""
    was_training = encoder.training
    encoder.eval()
    outs = []
    for start in range(0, len(images), batch_size):
        x = encoder.prepare(np.stack(images[start:start + batch_size]))
        outs.append(encoder(x).double().numpy())
    encoder.train(was_training)
    if not outs:
        return np.zeros((0,))
    return np.concatenate(outs)


def cosine_distance(a, b) -> float:
    """1 - cos(a, b); raises on a zero-norm vector."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise GeometryError(f"dimension mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise GeometryError("cosine distance undefined for a zero-norm vector")
    return float(1.0 - np.dot(a, b) / (na * nb))


def cosine_distance_rows(a, b, eps: float = NORM_EPS):
    """Row-wise cosine distance over the last axis, with clamped norms.

    Works on numpy arrays and torch tensors alike; used on training and
    scoring paths where a dead activation must not abort the run.
    """
    if isinstance(a, torch.Tensor):
        na = a.norm(dim=-1).clamp_min(eps)
        nb = b.norm(dim=-1).clamp_min(eps)
        return 1.0 - (a * b).sum(dim=-1) / (na * nb)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.maximum(np.linalg.norm(a, axis=-1), eps)
    nb = np.maximum(np.linalg.norm(b, axis=-1), eps)
    return 1.0 - (a * b).sum(axis=-1) / (na * nb)
