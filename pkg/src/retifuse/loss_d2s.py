"""Detail-to-semantic losses over frozen VGG-16 features, and the total loss.

Features are tapped at the last ReLU of each of the first four convolutional
blocks (``relu1_2``, ``relu2_2``, ``relu3_3``, ``relu4_3``). Gray inputs are
replicated to three channels and normalized with the ImageNet mean/std
before entering the backbone.

Pretrained weights are the torchvision ImageNet archive
``vgg16-397923af.pth``. They are looked up, in order, at an explicit path,
``$RETIFUSE_VGG16_WEIGHTS``, and the torch hub checkpoint cache. Fetch them
with ``python scripts/fetch_vgg16.py``.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .errors import InvalidArgument, ShapeError, WeightsUnavailable
from .loss_decomp import LossBreakdown

VGG16_URL = "https://download.pytorch.org/models/vgg16-397923af.pth"
VGG16_FILENAME = "vgg16-397923af.pth"
VGG16_SHA256_PREFIX = "397923af"
WEIGHTS_ENV = "RETIFUSE_VGG16_WEIGHTS"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# indices into torchvision's vgg16().features after which each tap is read
TAP_LAYERS = {1: 3, 2: 8, 3: 15, 4: 22}


def _vgg16_trunk() -> nn.Sequential:
    from torchvision.models.vgg import cfgs, make_layers

    # same layer indices as torchvision's vgg16().features, without the classifier
    return make_layers(cfgs["D"], batch_norm=False)[: TAP_LAYERS[4] + 1]


def default_weights_path() -> Path:
    return Path(torch.hub.get_dir()) / "checkpoints" / VGG16_FILENAME


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class FeatureExtractor(nn.Module):
    """Frozen VGG-16 trunk exposing the four block taps.

    Build it with :meth:`pretrained` for real training. :meth:`random` gives
    a seeded, randomly initialized trunk with the same architecture; it is
    meant for tests and offline smoke runs, where the gradients and shapes
    matter but the semantics of the features do not.
    """

    def __init__(self, trunk: nn.Sequential, source: str):
        super().__init__()
        self.trunk = trunk
        self.source = source
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.trunk.parameters():
            p.requires_grad_(False)
        self.eval()

    @classmethod
    def pretrained(cls, path: str | os.PathLike | None = None, check_hash: bool = True) -> "FeatureExtractor":
        candidates = [Path(path)] if path else []
        if not path and os.environ.get(WEIGHTS_ENV):
            candidates.append(Path(os.environ[WEIGHTS_ENV]))
        if not path:
            candidates.append(default_weights_path())
        found = next((c for c in candidates if c.is_file()), None)
        if found is None:
            raise WeightsUnavailable(
                "pretrained VGG-16 weights not found (looked in: "
                + ", ".join(str(c) for c in candidates)
                + f"). Run `python scripts/fetch_vgg16.py` or download {VGG16_URL} "
                f"and point ${WEIGHTS_ENV} at the file.")
        if check_hash and not _sha256(found).startswith(VGG16_SHA256_PREFIX):
            raise WeightsUnavailable(f"{found}: checksum does not match {VGG16_FILENAME}")
        state = torch.load(found, map_location="cpu", weights_only=True)
        trunk = _vgg16_trunk()
        prefix = "features."
        trunk_state = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
        own = trunk.state_dict()
        try:
            trunk.load_state_dict({k: trunk_state[k] for k in own})
        except KeyError as exc:
            raise WeightsUnavailable(f"{found}: missing tensor {exc}") from exc
        return cls(trunk, f"pretrained:{found}")

    @classmethod
    def random(cls, seed: int = 0) -> "FeatureExtractor":
        trunk = _vgg16_trunk()
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in trunk.modules():
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * 9
                    m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                    m.bias.zero_()
        return cls(trunk, f"random:{seed}")

    @classmethod
    def load(cls, spec: str = "pretrained") -> "FeatureExtractor":
        """``"pretrained"``, ``"pretrained:<path>"`` or ``"random[:seed]"``."""
        kind, _, arg = spec.partition(":")
        if kind == "pretrained":
            return cls.pretrained(arg or None)
        if kind == "random":
            return cls.random(int(arg) if arg else 0)
        raise InvalidArgument(f"unknown backbone spec {spec!r}")

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.trunk.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def preprocess(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] not in (1, 3):
            raise ShapeError(f"expected (N, 1|3, H, W), got {tuple(x.shape)}")
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)

    def taps(self, x: torch.Tensor, upto: int = 4) -> dict[int, torch.Tensor]:
        """Activations at taps ``1..upto``."""
        h = self.preprocess(x)
        out: dict[int, torch.Tensor] = {}
        want = {v: k for k, v in TAP_LAYERS.items() if k <= upto}
        last = max(want)
        for idx, layer in enumerate(self.trunk):
            h = layer(h)
            if idx in want:
                out[want[idx]] = h
            if idx == last:
                break
        return out

    def forward(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        return self.taps(x)

    def train(self, mode: bool = True) -> "FeatureExtractor":
        # the trunk never leaves eval mode
        return super().train(False)


def extract_features(extractor: FeatureExtractor, x: torch.Tensor, k: int) -> torch.Tensor:
    if k not in TAP_LAYERS:
        raise InvalidArgument(f"tap index must be in 1..4, got {k}")
    return extractor.taps(x, upto=k)[k]


@dataclass(frozen=True)
class D2SWeights:
    gamma1: float = 10.0
    gamma2: float = 2.5
    gamma4: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0
    w_v: float = 0.5
    w_i: float = 2.0

    def __post_init__(self):
        if min(self.gamma1, self.gamma2, self.gamma4, self.beta2, self.beta3, self.w_v, self.w_i) < 0:
            raise InvalidArgument("detail-to-semantic weights must be non-negative")


@dataclass
class D2SBreakdown:
    pixel: torch.Tensor
    shallow: torch.Tensor
    middle: torch.Tensor
    deep: torch.Tensor
    d2s_total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {"pixel": self.pixel.item(), "shallow": self.shallow.item(), "middle": self.middle.item(),
                "deep": self.deep.item(), "d2s_total": self.d2s_total.item()}


def _mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    return (a - b).square().mean()


def gram(features: torch.Tensor) -> torch.Tensor:
    """``F F^T / (C H W)`` for ``(C, H, W)`` or batched ``(N, C, H, W)`` features."""
    batched = features.ndim == 4
    f = features if batched else features[None]
    n, c, h, w = f.shape
    flat = f.reshape(n, c, h * w)
    g = flat @ flat.transpose(1, 2) / (c * h * w)
    return g if batched else g[0]


def pixel_loss(fused: torch.Tensor, vis: torch.Tensor) -> torch.Tensor:
    return _mse(fused, vis)


def shallow_loss(extractor: FeatureExtractor, fused: torch.Tensor, vis: torch.Tensor) -> torch.Tensor:
    return _mse(extract_features(extractor, fused, 1), extract_features(extractor, vis, 1))


def middle_loss_from_features(f_fused: dict, f_vis: dict, f_ir: dict, w: D2SWeights) -> torch.Tensor:
    total = 0.0
    for k, beta in ((2, w.beta2), (3, w.beta3)):
        target = w.w_i * f_ir[k] + w.w_v * f_vis[k]
        total = total + beta * _mse(f_fused[k], target)
    return total


def middle_loss(extractor: FeatureExtractor, fused: torch.Tensor, vis: torch.Tensor, ir: torch.Tensor,
                w: D2SWeights = D2SWeights()) -> torch.Tensor:
    return middle_loss_from_features(extractor.taps(fused, 3), extractor.taps(vis, 3),
                                     extractor.taps(ir, 3), w)


def deep_loss(extractor: FeatureExtractor, fused: torch.Tensor, ir: torch.Tensor) -> torch.Tensor:
    return _mse(gram(extract_features(extractor, fused, 4)), gram(extract_features(extractor, ir, 4)))


def d2s_loss(extractor: FeatureExtractor, fused: torch.Tensor, vis: torch.Tensor, ir: torch.Tensor,
             w: D2SWeights = D2SWeights()) -> D2SBreakdown:
    """All four terms from one backbone pass per image.

    ``vis`` must have the same channel count as ``fused``; ``ir`` is 1-channel
    and replicated like any gray input.
    """
    if fused.shape != vis.shape:
        raise ShapeError(f"fused {tuple(fused.shape)} vs visible {tuple(vis.shape)}")
    if ir.shape[0] != fused.shape[0] or ir.shape[-2:] != fused.shape[-2:]:
        raise ShapeError(f"fused {tuple(fused.shape)} vs infrared {tuple(ir.shape)}")
    ff = extractor.taps(fused)
    with torch.no_grad():
        fv = extractor.taps(vis, 3)
        fi = extractor.taps(ir)
    pixel = pixel_loss(fused, vis)
    shallow = _mse(ff[1], fv[1])
    middle = middle_loss_from_features(ff, fv, fi, w)
    deep = _mse(gram(ff[4]), gram(fi[4]))
    total = w.gamma1 * pixel + w.gamma2 * shallow + middle + w.gamma4 * deep
    return D2SBreakdown(pixel, shallow, middle, deep, total)


def combine_d2s(pixel, shallow, middle, deep, w: D2SWeights = D2SWeights()) -> float:
    return w.gamma1 * pixel + w.gamma2 * shallow + middle + w.gamma4 * deep


def total_loss(decomp: LossBreakdown, d2s: D2SBreakdown, lam: float = 1000.0) -> torch.Tensor:
    if lam < 0:
        raise InvalidArgument(f"lambda must be non-negative, got {lam}")
    return lam * decomp.decomp_total + d2s.d2s_total
