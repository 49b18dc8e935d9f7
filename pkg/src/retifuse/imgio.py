"""Image loading, resizing, saving, and the paired IR/VIS dataset layout.

An *image plane* is a float ``numpy`` array of shape ``(H, W, C)`` with
``C in {1, 3}`` and values in ``[0, 1]``. Datasets live on disk as::

    root/ir/<stem>.png
    root/vis/<stem>.png

with stems shared between the two folders.
"""

from __future__ import annotations

import csv
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import (
    DecodeError,
    EmptyDataset,
    InvalidArgument,
    IoError,
    LayoutError,
    NotFound,
    ShapeError,
    UnsupportedFormat,
)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

# PIL modes holding 8 bits per sample; everything else is rejected.
_EIGHT_BIT_MODES = {"1", "L", "P", "LA", "RGB", "RGBA", "CMYK", "YCbCr", "PA"}


def _check_plane(img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] not in (1, 3) or img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeError(f"expected an HxWxC image with C in (1, 3), got shape {img.shape}")


def to_gray(img: np.ndarray) -> np.ndarray:
    """Luminance of an RGB plane (BT.601 weights); gray planes pass through."""
    _check_plane(img)
    if img.shape[2] == 1:
        return img.copy()
    return (img @ LUMA_WEIGHTS)[..., None]


def load_image(path: str | os.PathLike, force_gray: bool = True) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode not in _EIGHT_BIT_MODES:
                raise UnsupportedFormat(f"{path}: unsupported pixel mode {mode!r} (8-bit images only)")
            if mode in ("1", "L", "LA"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)[..., None]
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except UnsupportedFormat:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"{path}: cannot decode image ({exc})") from exc

    img = arr / 255.0
    if force_gray and img.shape[2] == 3:
        img = to_gray(img)
    return img


def resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping.

    Every output value is a convex combination of input values, so the
    ``[0, 1]`` range is preserved.
    """
    if h < 1 or w < 1:
        raise InvalidArgument(f"target size must be positive, got {h}x{w}")
    _check_plane(img)
    src_h, src_w = img.shape[:2]
    if (src_h, src_w) == (h, w):
        return img.copy()

    def axis_weights(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        coord = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        coord = np.clip(coord, 0.0, n_in - 1)
        lo = np.floor(coord).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, coord - lo

    r0, r1, fr = axis_weights(h, src_h)
    c0, c1, fc = axis_weights(w, src_w)
    rows = img[r0] * (1.0 - fr)[:, None, None] + img[r1] * fr[:, None, None]
    out = rows[:, c0] * (1.0 - fc)[None, :, None] + rows[:, c1] * fc[None, :, None]
    return out


def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to ``[0, 1]`` and round half-up to 8-bit."""
    if not np.all(np.isfinite(img)):
        raise InvalidArgument("image contains non-finite values")
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _atomic_write(path: Path, write) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            write(fh)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    _atomic_write(Path(path), lambda fh: fh.write(data))


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write a plane as 8-bit PNG (clamped, ``round(v * 255)`` half-up)."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    _check_plane(img)
    q = quantize(img)
    pil = Image.fromarray(q[..., 0], mode="L") if q.shape[2] == 1 else Image.fromarray(q, mode="RGB")
    _atomic_write(Path(path), lambda fh: pil.save(fh, format="PNG"))


# -- tensor bridges -------------------------------------------------------

def to_tensor(img: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """``(H, W, C)`` plane -> ``(1, C, H, W)`` tensor."""
    _check_plane(np.asarray(img))
    return torch.as_tensor(np.ascontiguousarray(np.transpose(img, (2, 0, 1))), dtype=dtype)[None]


def to_plane(t: torch.Tensor) -> np.ndarray:
    """``(1, C, H, W)`` or ``(C, H, W)`` tensor -> ``(H, W, C)`` float64 plane."""
    t = t.detach().cpu()
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ShapeError(f"expected a single-image batch, got {tuple(t.shape)}")
        t = t[0]
    return np.transpose(t.double().numpy(), (1, 2, 0))


# -- YCbCr (full-range BT.601, as used by JPEG) ----------------------------

def rgb_to_ycbcr(img: np.ndarray) -> np.ndarray:
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 0.5 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 0.5 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(img: np.ndarray) -> np.ndarray:
    y, cb, cr = img[..., 0], img[..., 1] - 0.5, img[..., 2] - 0.5
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


# -- dataset ---------------------------------------------------------------

@dataclass
class ImagePair:
    id: str
    visible: np.ndarray
    infrared: np.ndarray


@dataclass
class DatasetManifest:
    root: Path
    pairs: list[str]
    split: str = "train"
    ir_paths: dict[str, Path] = field(default_factory=dict, repr=False)
    vis_paths: dict[str, Path] = field(default_factory=dict, repr=False)
    warnings: list[str] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.pairs)

    def subset(self, ids: Sequence[str]) -> "DatasetManifest":
        wanted = set(ids)
        keep = [i for i in self.pairs if i in wanted]
        return DatasetManifest(self.root, keep, self.split,
                               {i: self.ir_paths[i] for i in keep},
                               {i: self.vis_paths[i] for i in keep})

    def sample(self, n: int, seed: int = 0) -> "DatasetManifest":
        """A fixed, seed-determined subset of ``n`` pairs (kept in sorted order)."""
        if n < 1:
            raise InvalidArgument(f"subset size must be >= 1, got {n}")
        if n >= len(self.pairs):
            return self.subset(self.pairs)
        picked = np.random.default_rng(seed).choice(len(self.pairs), size=n, replace=False)
        return self.subset([self.pairs[i] for i in picked])

    def to_csv(self, path: str | os.PathLike) -> None:
        lines = ["id,ir_path,vis_path"]
        for pid in self.pairs:
            lines.append(f"{pid},{self.ir_paths[pid]},{self.vis_paths[pid]}")
        atomic_write_text(path, "\n".join(lines) + "\n")

    def load_pair(self, pid: str, size: tuple[int, int] | None = None, force_gray: bool = True) -> ImagePair:
        vis = load_image(self.vis_paths[pid], force_gray=force_gray)
        ir = load_image(self.ir_paths[pid], force_gray=True)
        if size is not None:
            vis = resize(vis, *size)
            ir = resize(ir, *size)
        elif vis.shape[:2] != ir.shape[:2]:
            raise ShapeError(f"pair {pid!r}: visible {vis.shape[:2]} vs infrared {ir.shape[:2]}")
        return ImagePair(pid, vis, ir)

    def __iter__(self) -> Iterator[str]:
        return iter(self.pairs)


def _stems(folder: Path) -> dict[str, Path]:
    found: dict[str, Path] = {}
    for p in sorted(folder.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            found.setdefault(p.stem, p)
    return found


def scan_dataset(root: str | os.PathLike, split: str = "train") -> DatasetManifest:
    root = Path(root)
    ir_dir, vis_dir = root / "ir", root / "vis"
    for d in (ir_dir, vis_dir):
        if not d.is_dir():
            raise LayoutError(f"expected subdirectory {d}")
    ir, vis = _stems(ir_dir), _stems(vis_dir)
    matched = sorted(set(ir) & set(vis))
    warnings = [f"unmatched infrared file: {ir[s]}" for s in sorted(set(ir) - set(vis))]
    warnings += [f"unmatched visible file: {vis[s]}" for s in sorted(set(vis) - set(ir))]
    for w in warnings:
        log.warning(w)
    if not matched:
        raise EmptyDataset(f"no matched ir/vis pairs under {root}")
    return DatasetManifest(root, matched, split,
                           {s: ir[s] for s in matched}, {s: vis[s] for s in matched}, warnings)


def sample_data_root() -> Path:
    """Directory of the small registered pairs shipped with the package."""
    return Path(__file__).resolve().parent / "data" / "pairs"


def write_manifest_rows(path: str | os.PathLike, rows: list[dict], fieldnames: Sequence[str]) -> None:
    import io

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())
