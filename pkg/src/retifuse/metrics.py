"""Fusion quality metrics on 8-bit grayscale images: En, SD, MI and Nabf.

Nabf is the modified fusion-artifact measure built on the Petrovic gradient
framework. The constants below are the canonical ones of that framework:

=========  ======  ====================================================
constant   value   meaning
=========  ======  ====================================================
T_d        2       edge-strength threshold for a source pixel to count
L_g        1.5     exponent on source edge strength in the weights
Gamma_g    0.9999  strength-preservation sigmoid amplitude
k_g        19      strength-preservation sigmoid slope
sigma_g    0.5     strength-preservation sigmoid midpoint
Gamma_a    0.9995  orientation-preservation sigmoid amplitude
k_a        22      orientation-preservation sigmoid slope
sigma_a    0.5     orientation-preservation sigmoid midpoint
=========  ======  ====================================================

Gradients come from 3x3 Sobel kernels scaled by 1/8, with edge-replicating
borders.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .errors import EmptyDataset, InvalidArgument, ShapeError
from .imgio import IMAGE_SUFFIXES, atomic_write_text, load_image, quantize

log = logging.getLogger(__name__)

NABF_T_D = 2.0
NABF_L_G = 1.5
NABF_GAMMA_G, NABF_K_G, NABF_SIGMA_G = 0.9999, 19.0, 0.5
NABF_GAMMA_A, NABF_K_A, NABF_SIGMA_A = 0.9995, 22.0, 0.5

SOBEL_V = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64) / 8.0
SOBEL_H = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=np.float64) / 8.0

METRIC_COLUMNS = ("en", "sd", "mi", "nabf")


def as_gray_u8(img: np.ndarray) -> np.ndarray:
    """Accept a uint8 image or a float plane in ``[0, 1]``; return 2-D uint8."""
    img = np.asarray(img)
    if img.ndim == 3:
        if img.shape[2] != 1:
            raise ShapeError(f"metrics need single-channel images, got shape {img.shape}")
        img = img[..., 0]
    if img.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {img.shape}")
    if img.dtype == np.uint8:
        return img
    return quantize(img)


def _histogram(img: np.ndarray) -> np.ndarray:
    return np.bincount(img.ravel(), minlength=256).astype(np.float64)


def _shannon(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())


def entropy(img: np.ndarray) -> float:
    g = as_gray_u8(img)
    if g.size == 0:
        raise InvalidArgument("entropy of an empty image")
    return max(_shannon(_histogram(g)), 0.0)


def standard_deviation(img: np.ndarray) -> float:
    g = as_gray_u8(img)
    if g.size == 0:
        raise InvalidArgument("standard deviation of an empty image")
    return float(np.std(g.astype(np.float64)))


def mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """I(A; B) in bits from the raw 256x256 joint histogram."""
    a, b = as_gray_u8(a), as_gray_u8(b)
    if a.shape != b.shape:
        raise ShapeError(f"mutual information needs equal shapes, got {a.shape} and {b.shape}")
    if a.size == 0:
        raise InvalidArgument("mutual information of empty images")
    joint = np.bincount(a.ravel().astype(np.int64) * 256 + b.ravel(), minlength=256 * 256)
    joint = joint.reshape(256, 256).astype(np.float64) / a.size
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    nz = joint > 0
    outer = np.outer(pa, pb)
    mi = float((joint[nz] * np.log2(joint[nz] / outer[nz])).sum())
    return max(mi, 0.0)


def fusion_mutual_information(vis: np.ndarray, ir: np.ndarray, fused: np.ndarray) -> float:
    return mutual_information(vis, fused) + mutual_information(ir, fused)


def _sobel(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ext = np.pad(x, 1, mode="edge")
    return convolve2d(ext, SOBEL_V, mode="valid"), convolve2d(ext, SOBEL_H, mode="valid")


def _edge_preservation(gs, as_, gf, af):
    # relative strength: the smaller over the larger, 0 where either is 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(gs > gf, gf / gs, gs / gf)
    ratio = np.where((gs == 0) | (gf == 0), 0.0, ratio)
    orient = np.abs(np.abs(as_ - af) - np.pi / 2) * 2 / np.pi
    qg = NABF_GAMMA_G / (1 + np.exp(-NABF_K_G * (ratio - NABF_SIGMA_G)))
    qa = NABF_GAMMA_A / (1 + np.exp(-NABF_K_A * (orient - NABF_SIGMA_A)))
    return np.sqrt(qg * qa)


def _orientation(gv, gh):
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.arctan(gv / gh)
    return np.where((gv == 0) & (gh == 0), 0.0, a)


def nabf(vis: np.ndarray, ir: np.ndarray, fused: np.ndarray) -> float:
    """Modified fusion-artifact measure; 0 is artifact-free, lower is better."""
    a = as_gray_u8(vis).astype(np.float64)
    b = as_gray_u8(ir).astype(np.float64)
    f = as_gray_u8(fused).astype(np.float64)
    if not (a.shape == b.shape == f.shape):
        raise ShapeError(f"nabf needs equal shapes, got {a.shape}, {b.shape}, {f.shape}")

    grads = []
    for x in (a, b, f):
        gv, gh = _sobel(x)
        grads.append((np.hypot(gv, gh), _orientation(gv, gh)))
    (ga, aa), (gb, ab), (gf, af) = grads

    q_af = _edge_preservation(ga, aa, gf, af)
    q_bf = _edge_preservation(gb, ab, gf, af)
    wa = np.where(ga >= NABF_T_D, ga ** NABF_L_G, 0.0)
    wb = np.where(gb >= NABF_T_D, gb ** NABF_L_G, 0.0)
    wsum = float((wa + wb).sum())
    if wsum == 0.0:
        return 0.0
    artifact = (gf > ga) & (gf > gb)
    value = float((artifact * ((1 - q_af) * wa + (1 - q_bf) * wb)).sum() / wsum)
    return min(max(value, 0.0), 1.0)


def image_metrics(vis: np.ndarray, ir: np.ndarray, fused: np.ndarray) -> dict[str, float]:
    return {
        "en": entropy(fused),
        "sd": standard_deviation(fused),
        "mi": fusion_mutual_information(vis, ir, fused),
        "nabf": nabf(vis, ir, fused),
    }


@dataclass
class MetricReport:
    per_image: dict[str, dict[str, float]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def aggregate(self) -> dict[str, float]:
        if not self.per_image:
            return {k: float("nan") for k in METRIC_COLUMNS}
        return {k: float(np.mean([row[k] for row in self.per_image.values()])) for k in METRIC_COLUMNS}

    def to_csv(self) -> str:
        lines = ["id,en,sd,mi,nabf"]
        for pid, row in self.per_image.items():
            lines.append(",".join([pid] + [f"{row[k]:.6f}" for k in METRIC_COLUMNS]))
        agg = self.aggregate
        lines.append(",".join(["MEAN"] + [f"{agg[k]:.6f}" for k in METRIC_COLUMNS]))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"per_image": self.per_image, "aggregate": self.aggregate,
                           "warnings": self.warnings}, indent=2)

    def write(self, path: str | os.PathLike) -> None:
        path = Path(path)
        text = self.to_json() if path.suffix.lower() == ".json" else self.to_csv()
        atomic_write_text(path, text)


def _stem_map(folder: Path) -> dict[str, Path]:
    out: dict[str, Path] = {}
    for p in sorted(folder.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            out.setdefault(p.stem, p)
    return out


def evaluate_directory(fused_dir, vis_dir, ir_dir) -> MetricReport:
    dirs = [Path(fused_dir), Path(vis_dir), Path(ir_dir)]
    for d in dirs:
        if not d.is_dir():
            raise EmptyDataset(f"not a directory: {d}")
    fused, vis, ir = (_stem_map(d) for d in dirs)
    stems = sorted(set(fused) & set(vis) & set(ir))
    report = MetricReport()
    for stem in sorted(set(fused) | set(vis) | set(ir)):
        if stem not in stems:
            missing = [n for n, m in (("fused", fused), ("vis", vis), ("ir", ir)) if stem not in m]
            msg = f"{stem}: missing in {', '.join(missing)}; skipped"
            report.warnings.append(msg)
            log.warning(msg)
    if not stems:
        raise EmptyDataset(f"no matching stems across {', '.join(map(str, dirs))}")
    for stem in stems:
        f = load_image(fused[stem], force_gray=True)
        v = load_image(vis[stem], force_gray=True)
        r = load_image(ir[stem], force_gray=True)
        report.per_image[stem] = image_metrics(v, r, f)
    return report
