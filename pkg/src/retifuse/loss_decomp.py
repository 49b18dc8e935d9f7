"""Decomposition losses: projection, reflectance consistency and Retinex terms.

All squared-norm terms share one reduction, chosen by ``reduction``:
``"mean"`` (default, averages over every element including the batch) or
``"sum"``. The total-variation term uses the same reduction on each
difference map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import InvalidArgument, NumericError, ShapeError
from .pipeline import DecompositionResult

ILLUMINATION_FLOOR = 1e-4


@dataclass(frozen=True)
class DecompLossWeights:
    w0: float = 500.0
    w1: float = 1.0
    w2: float = 1.0

    def __post_init__(self):
        if min(self.w0, self.w1, self.w2) < 0:
            raise InvalidArgument("decomposition loss weights must be non-negative")


@dataclass
class LossBreakdown:
    projection: torch.Tensor
    consistency: torch.Tensor
    retinex: torch.Tensor
    retinex_terms: dict[str, torch.Tensor] = field(default_factory=dict)
    decomp_total: torch.Tensor | None = None

    def as_floats(self) -> dict[str, float]:
        out = {"projection": self.projection.item(), "consistency": self.consistency.item(),
               "retinex": self.retinex.item(), "decomp_total": self.decomp_total.item()}
        out.update({f"retinex_{k}": v.item() for k, v in self.retinex_terms.items()})
        return out


def _reduce(x: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return x.mean()
    if reduction == "sum":
        return x.sum()
    raise InvalidArgument(f"unknown reduction {reduction!r}")


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def squared_error(a: torch.Tensor, b: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    _same_shape(a, b, "squared error")
    return _reduce((a - b).square(), reduction)


def projection_loss(image: torch.Tensor, projected: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    _same_shape(image, projected, "projection loss")
    return squared_error(image, projected, reduction)


def consistency_loss(ref_vis: torch.Tensor, ref_ir: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    _same_shape(ref_vis, ref_ir, "consistency loss")
    return squared_error(ref_vis, ref_ir, reduction)


def initial_illumination(image: torch.Tensor) -> torch.Tensor:
    """Per-pixel maximum over the channel axis of an ``(N, C, H, W)`` tensor."""
    if image.ndim != 4 or image.shape[1] not in (1, 3):
        raise ShapeError(f"expected (N, C, H, W) with C in (1, 3), got {tuple(image.shape)}")
    if image.shape[1] == 1:
        return image.clone()
    return image.amax(dim=1, keepdim=True)


def forward_differences(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Vertical and horizontal forward differences; the last row/column is 0."""
    dy = torch.zeros_like(x)
    dx = torch.zeros_like(x)
    dy[..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    dx[..., :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    return dy, dx


def total_variation(x: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    dy, dx = forward_differences(x)
    return _reduce(dy.abs(), reduction) + _reduce(dx.abs(), reduction)


def retinex_loss(illum: torch.Tensor, refl: torch.Tensor, projected: torch.Tensor,
                 reduction: str = "mean") -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Reconstruction + reflectance consistency + illumination prior + TV.

    The division ``projected / L`` uses a detached, floored copy of ``L`` so
    no gradient reaches the illumination through that term.
    """
    if illum.ndim != 4 or illum.shape[1] != 1:
        raise ShapeError(f"illumination must be (N, 1, H, W), got {tuple(illum.shape)}")
    _same_shape(refl, projected, "retinex loss")
    if illum.shape[0] != refl.shape[0] or illum.shape[-2:] != refl.shape[-2:]:
        raise ShapeError(f"illumination {tuple(illum.shape)} does not match reflectance {tuple(refl.shape)}")
    for t in (illum, refl, projected):
        if not torch.isfinite(t).all():
            raise NumericError("non-finite value in retinex loss input")

    denom = illum.detach().clamp_min(ILLUMINATION_FLOOR)
    terms = {
        "recon": _reduce((illum * refl - projected).square(), reduction),
        "ref_consistency": _reduce((refl - projected / denom).square(), reduction),
        "illum_consistency": _reduce((illum - initial_illumination(projected)).square(), reduction),
        "tv": total_variation(illum, reduction),
    }
    total = terms["recon"] + terms["ref_consistency"] + terms["illum_consistency"] + terms["tv"]
    return total, terms


def decomposition_loss(vis: DecompositionResult, ir: DecompositionResult, image: torch.Tensor,
                       weights: DecompLossWeights = DecompLossWeights(),
                       reduction: str = "mean") -> LossBreakdown:
    """Weighted sum ``w0 * projection + w1 * consistency + w2 * retinex``.

    ``image`` is the raw visible input. Projection and Retinex terms act on the
    visible stream only; the infrared stream enters through the consistency
    term.
    """
    proj = projection_loss(image, vis.projected, reduction)
    cons = consistency_loss(vis.reflectance, ir.reflectance, reduction)
    ret, terms = retinex_loss(vis.illumination, vis.reflectance, vis.projected, reduction)
    total = weights.w0 * proj + weights.w1 * cons + weights.w2 * ret
    return LossBreakdown(proj, cons, ret, terms, total)
