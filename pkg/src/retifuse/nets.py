"""Resolution-preserving plain CNNs and the five-network bundle.

Every network is ``num_layers`` 3x3 convolutions with stride 1 and replicate
padding; ReLU after all but the last layer, sigmoid after the last. No layer
changes the spatial size, so outputs line up pixel-for-pixel with inputs.

Checkpoint format
-----------------
``<name>.safetensors``
    Flat map ``qualified name -> (dtype F32, shape, little-endian payload)``
    in the safetensors layout (8-byte LE header length, JSON header, raw
    data). Network parameters are stored under ``<net>.<param>``; optimizer
    moments, when present, under ``optim.<net>.<param>.exp_avg`` and
    ``optim.<net>.<param>.exp_avg_sq``.
``<name>.safetensors.json``
    Manifest sidecar: ``config`` (architecture), ``config_hash``, ``epoch``,
    ``step``, ``loss_weights``, and ``optim_step`` (Adam step count).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import torch
from torch import nn
from torch.nn import functional as F

from .errors import DecodeError, IncompatibleCheckpoint, InvalidArgument, NotFound, ShapeError
from .imgio import atomic_write_bytes, atomic_write_text

NET_NAMES = ("p_net_vis", "ill_vis", "ref_vis", "ill_ir", "ref_ir")


@dataclass(frozen=True)
class PlainCnnSpec:
    in_channels: int
    out_channels: int
    hidden_channels: int = 64
    num_layers: int = 5
    kernel: int = 3

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise InvalidArgument("channel counts must be positive")
        if self.hidden_channels < 1:
            raise InvalidArgument(f"hidden width must be >= 1, got {self.hidden_channels}")
        if self.num_layers < 1:
            raise InvalidArgument("num_layers must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidArgument("kernel size must be odd")

    def parameter_count(self) -> int:
        k2 = self.kernel * self.kernel
        if self.num_layers == 1:
            return (self.in_channels * k2 + 1) * self.out_channels
        first = (self.in_channels * k2 + 1) * self.hidden_channels
        middle = (self.num_layers - 2) * (self.hidden_channels * k2 + 1) * self.hidden_channels
        last = (self.hidden_channels * k2 + 1) * self.out_channels
        return first + middle + last


class PlainCnn(nn.Module):
    def __init__(self, spec: PlainCnnSpec):
        super().__init__()
        self.spec = spec
        widths = [spec.in_channels] + [spec.hidden_channels] * (spec.num_layers - 1) + [spec.out_channels]
        self.convs = nn.ModuleList(
            nn.Conv2d(cin, cout, spec.kernel, stride=1, padding=spec.kernel // 2, padding_mode="replicate")
            for cin, cout in zip(widths[:-1], widths[1:])
        )

    def reset_parameters(self, generator: torch.Generator) -> None:
        # uniform fan-in bounds, He-style gain for the ReLU layers
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                bound = math.sqrt(6.0 / fan_in)
                conv.weight.uniform_(-bound, bound, generator=generator)
                b = 1.0 / math.sqrt(fan_in)
                conv.bias.uniform_(-b, b, generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"expected (N, {self.spec.in_channels}, H, W) input, got {tuple(x.shape)}")
        for conv in self.convs[:-1]:
            x = F.relu(conv(x))
        # keep the open interval even where sigmoid rounds to 0 or 1
        eps = torch.finfo(x.dtype).eps
        return torch.sigmoid(self.convs[-1](x)).clamp(eps, 1.0 - eps)


@dataclass(frozen=True)
class BundleConfig:
    channels: int = 1
    hidden: int = 64
    num_layers: int = 5
    ir_projection: str = "identity"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class ModelBundle(nn.Module):
    """The five trainable networks.

    ``p_net_vis`` maps C -> C channels, ``ill_*`` map to 1 channel and
    ``ref_*`` map to C channels. Infrared inputs are always 1 channel.
    """

    def __init__(self, config: BundleConfig):
        super().__init__()
        c, h, n = config.channels, config.hidden, config.num_layers
        self.config = config
        self.p_net_vis = PlainCnn(PlainCnnSpec(c, c, h, n))
        self.ill_vis = PlainCnn(PlainCnnSpec(c, 1, h, n))
        self.ref_vis = PlainCnn(PlainCnnSpec(c, c, h, n))
        self.ill_ir = PlainCnn(PlainCnnSpec(1, 1, h, n))
        self.ref_ir = PlainCnn(PlainCnnSpec(1, c, h, n))

    @property
    def channels(self) -> int:
        return self.config.channels

    def networks(self) -> dict[str, PlainCnn]:
        return {name: getattr(self, name) for name in NET_NAMES}


def build_bundle(channels: int = 1, hidden: int = 64, seed: int = 0, num_layers: int = 5) -> ModelBundle:
    if channels not in (1, 3):
        raise InvalidArgument(f"channels must be 1 or 3, got {channels}")
    bundle = ModelBundle(BundleConfig(channels, hidden, num_layers))
    gen = torch.Generator().manual_seed(seed)
    for name in NET_NAMES:
        getattr(bundle, name).reset_parameters(gen)
    return bundle


def forward(net: PlainCnn, x: torch.Tensor) -> torch.Tensor:
    return net(x)


# -- checkpoints -----------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_checkpoint(bundle: ModelBundle, path: str | os.PathLike, *, epoch: int = 0, step: int = 0,
                    loss_weights: dict | None = None, optimizer: torch.optim.Optimizer | None = None,
                    extra: dict | None = None) -> None:
    from safetensors.torch import save

    path = Path(path)
    tensors = {name: p.detach().to(torch.float32).contiguous().clone()
               for name, p in bundle.named_parameters()}
    optim_step = None
    if optimizer is not None:
        names = {id(p): name for name, p in bundle.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                base = f"optim.{names[id(p)]}"
                tensors[f"{base}.exp_avg"] = st["exp_avg"].detach().to(torch.float32).contiguous().clone()
                tensors[f"{base}.exp_avg_sq"] = st["exp_avg_sq"].detach().to(torch.float32).contiguous().clone()
                optim_step = int(st["step"])
    manifest = {
        "format": "retifuse-checkpoint/1",
        "config": bundle.config.to_dict(),
        "config_hash": bundle.config.hash(),
        "epoch": epoch,
        "step": step,
        "loss_weights": loss_weights or {},
        "optim_step": optim_step,
    }
    if extra:
        manifest.update(extra)
    atomic_write_bytes(path, save(tensors, metadata={"config_hash": bundle.config.hash()}))
    atomic_write_text(_sidecar(path), json.dumps(manifest, indent=2, sort_keys=True))


def read_manifest(path: str | os.PathLike) -> dict:
    path = Path(path)
    side = _sidecar(path)
    if not path.is_file():
        raise NotFound(f"no such checkpoint: {path}")
    if not side.is_file():
        raise NotFound(f"checkpoint manifest missing: {side}")
    try:
        return json.loads(side.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DecodeError(f"corrupt checkpoint manifest {side}: {exc}") from exc


def _read_tensors(path: Path) -> dict[str, torch.Tensor]:
    from safetensors.torch import load

    try:
        return load(path.read_bytes())
    except Exception as exc:  # safetensors raises its own error type
        raise DecodeError(f"corrupt checkpoint archive {path}: {exc}") from exc


def load_checkpoint(path: str | os.PathLike, config: BundleConfig | None = None,
                    optimizer: torch.optim.Optimizer | None = None) -> tuple[ModelBundle, dict]:
    """Rebuild a bundle from disk; returns ``(bundle, manifest)``.

    When ``config`` is given its hash must match the stored one. When an
    ``optimizer`` built over the returned bundle's parameters is needed,
    use :func:`restore_optimizer` after constructing it.
    """
    path = Path(path)
    manifest = read_manifest(path)
    stored = BundleConfig(**manifest["config"])
    if config is not None and config.hash() != manifest.get("config_hash"):
        raise IncompatibleCheckpoint(
            f"checkpoint built for {manifest['config']}, requested {config.to_dict()}")
    tensors = _read_tensors(path)
    bundle = ModelBundle(stored)
    own = dict(bundle.named_parameters())
    missing = [n for n in own if n not in tensors]
    if missing:
        raise IncompatibleCheckpoint(f"checkpoint lacks parameters: {missing[:5]}")
    with torch.no_grad():
        for name, p in own.items():
            t = tensors[name]
            if t.shape != p.shape:
                raise IncompatibleCheckpoint(f"{name}: stored shape {tuple(t.shape)} != {tuple(p.shape)}")
            p.copy_(t)
    if optimizer is not None:
        restore_optimizer(bundle, optimizer, path, manifest, tensors)
    return bundle, manifest


def restore_optimizer(bundle: ModelBundle, optimizer: torch.optim.Optimizer, path: str | os.PathLike,
                      manifest: dict | None = None, tensors: dict | None = None) -> None:
    path = Path(path)
    manifest = manifest or read_manifest(path)
    tensors = tensors if tensors is not None else _read_tensors(path)
    if manifest.get("optim_step") is None:
        return
    for name, p in bundle.named_parameters():
        base = f"optim.{name}"
        if f"{base}.exp_avg" not in tensors:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(manifest["optim_step"])),
            "exp_avg": tensors[f"{base}.exp_avg"].to(p.dtype).clone(),
            "exp_avg_sq": tensors[f"{base}.exp_avg_sq"].to(p.dtype).clone(),
        }
