"""Decomposition of both modalities and the closed-form fusion layer."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ShapeError
from .nets import ModelBundle


@dataclass
class DecompositionResult:
    projected: torch.Tensor
    illumination: torch.Tensor
    reflectance: torch.Tensor
    modality: str


@dataclass
class FusionOutput:
    fused: torch.Tensor
    parts: dict[str, torch.Tensor]


def _check_input(x: torch.Tensor, channels: int, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected (N, C, H, W), got {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ShapeError(f"{what}: expected {channels} channel(s), got {x.shape[1]}")


def decompose_visible(bundle: ModelBundle, image: torch.Tensor,
                      decompose_input: str = "raw") -> DecompositionResult:
    """Project the visible image and split it into illumination and reflectance.

    With ``decompose_input="raw"`` the illumination/reflectance networks read
    the raw image and the projection only enters the losses; ``"projected"``
    feeds them the projected image instead.
    """
    _check_input(image, bundle.channels, "visible image")
    projected = bundle.p_net_vis(image)
    src = projected if decompose_input == "projected" else image
    return DecompositionResult(projected, bundle.ill_vis(src), bundle.ref_vis(src), "visible")


def decompose_infrared(bundle: ModelBundle, image: torch.Tensor) -> DecompositionResult:
    # infrared projection is the identity by default
    _check_input(image, 1, "infrared image")
    return DecompositionResult(image, bundle.ill_ir(image), bundle.ref_ir(image), "infrared")


def fuse(vis: DecompositionResult, ir: DecompositionResult) -> FusionOutput:
    """``(L_vi + L_ir) * (R_vi + R_ir)``, with 1-channel illumination broadcast over channels."""
    lv, li, rv, ri = vis.illumination, ir.illumination, vis.reflectance, ir.reflectance
    if lv.shape != li.shape:
        raise ShapeError(f"illumination shapes differ: {tuple(lv.shape)} vs {tuple(li.shape)}")
    if rv.shape != ri.shape:
        raise ShapeError(f"reflectance shapes differ: {tuple(rv.shape)} vs {tuple(ri.shape)}")
    if lv.shape[0] != rv.shape[0] or lv.shape[-2:] != rv.shape[-2:] or lv.shape[1] not in (1, rv.shape[1]):
        raise ShapeError(f"illumination {tuple(lv.shape)} cannot broadcast over reflectance {tuple(rv.shape)}")
    fused = (lv + li) * (rv + ri)
    return FusionOutput(fused, {"L_vi": lv, "L_ir": li, "R_vi": rv, "R_ir": ri})


def fuse_pair(bundle: ModelBundle, visible: torch.Tensor, infrared: torch.Tensor,
              decompose_input: str = "raw") -> FusionOutput:
    return run_pair(bundle, visible, infrared, decompose_input)[2]


def run_pair(bundle: ModelBundle, visible: torch.Tensor, infrared: torch.Tensor,
             decompose_input: str = "raw") -> tuple[DecompositionResult, DecompositionResult, FusionOutput]:
    """Like :func:`fuse_pair` but also hands back both decompositions (training path)."""
    if visible.shape[-2:] != infrared.shape[-2:] or visible.shape[0] != infrared.shape[0]:
        raise ShapeError(
            f"visible {tuple(visible.shape)} and infrared {tuple(infrared.shape)} are not a registered pair")
    vis = decompose_visible(bundle, visible, decompose_input)
    ir = decompose_infrared(bundle, infrared)
    return vis, ir, fuse(vis, ir)


def stretch(x: torch.Tensor) -> torch.Tensor:
    """Per-image min-max stretch to ``[0, 1]`` (display only)."""
    flat = x.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1, 1)
    return (x - lo) / (hi - lo).clamp_min(1e-12)
