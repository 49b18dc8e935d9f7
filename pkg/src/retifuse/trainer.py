"""Training loop, configuration, dataset fusion/evaluation and the ablation sweep."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np
import torch

from . import imgio
from .errors import ConfigError, FusionError, NumericError
from .imgio import DatasetManifest
from .loss_d2s import D2SWeights, FeatureExtractor, d2s_loss, total_loss
from .loss_decomp import DecompLossWeights, decomposition_loss
from .metrics import MetricReport, evaluate_directory
from .nets import BundleConfig, ModelBundle, build_bundle, load_checkpoint, restore_optimizer, save_checkpoint
from .pipeline import fuse_pair, run_pair

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 8
    epochs: int = 4
    max_steps: int | None = None
    crop: int = 128
    random_crop: bool = False
    seed: int = 0
    channels: int = 1
    hidden: int = 64
    num_layers: int = 5
    decompose_input: str = "raw"
    decomp_weights: DecompLossWeights = field(default_factory=DecompLossWeights)
    d2s_weights: D2SWeights = field(default_factory=D2SWeights)
    lam: float = 1000.0
    backbone: str = "pretrained"
    device: str = "cpu"
    dtype: str = "float32"
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.decomp_weights, dict):
            self.decomp_weights = DecompLossWeights(**self.decomp_weights)
        if isinstance(self.d2s_weights, dict):
            self.d2s_weights = D2SWeights(**self.d2s_weights)
        self.validate()

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.crop < 16:
            raise ConfigError(f"crop must be >= 16, got {self.crop}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.hidden < 1:
            raise ConfigError(f"hidden must be >= 1, got {self.hidden}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.decompose_input not in ("raw", "projected"):
            raise ConfigError(f"decompose_input must be raw or projected, got {self.decompose_input!r}")
        if self.device not in ("cpu", "accelerator"):
            raise ConfigError(f"device must be cpu or accelerator, got {self.device!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    @property
    def bundle_config(self) -> BundleConfig:
        return BundleConfig(self.channels, self.hidden, self.num_layers)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    @property
    def torch_device(self) -> torch.device:
        if self.device == "accelerator":
            if not torch.cuda.is_available():
                raise ConfigError("device=accelerator requested but no CUDA device is available")
            return torch.device("cuda")
        return torch.device("cpu")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["version"] = CONFIG_VERSION
        return d

    def loss_weights(self) -> dict[str, Any]:
        return {"decomp": dataclasses.asdict(self.decomp_weights),
                "d2s": dataclasses.asdict(self.d2s_weights), "lam": self.lam}

    def replace(self, **changes) -> "TrainConfig":
        return config_from_dict({**self.to_dict(), **changes})


_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def config_from_dict(data: dict[str, Any]) -> TrainConfig:
    data = dict(data)
    version = data.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version} (expected {CONFIG_VERSION})")
    unknown = set(data) - _FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return TrainConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | os.PathLike | None, overrides: dict[str, Any] | None = None) -> TrainConfig:
    """Built-in defaults < config file (YAML or JSON) < ``overrides``.

    Nested weight overrides use dotted keys, e.g. ``{"d2s_weights.gamma2": 1.5}``.
    """
    import yaml

    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    base = TrainConfig().to_dict()
    for key in ("decomp_weights", "d2s_weights"):
        base[key].update(data.pop(key, None) or {})
    base.update(data)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        head, _, tail = key.partition(".")
        if tail:
            if head not in ("decomp_weights", "d2s_weights"):
                raise ConfigError(f"unknown nested key {key}")
            base[head][tail] = value
        else:
            base[key] = value
    return config_from_dict(base)


# -- data --------------------------------------------------------------------

class PairBatcher:
    """Deterministic batches of resized (vis, ir) tensors.

    Epoch ``e`` visits pairs in a permutation drawn from ``seed`` and ``e``,
    so the batch served at any global step is a pure function of the step.
    """

    def __init__(self, manifest: DatasetManifest, config: TrainConfig, cache_limit: int = 512):
        self.manifest = manifest
        self.config = config
        self.ids = list(manifest.pairs)
        self.cache_limit = cache_limit
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.ids) / self.config.batch_size)

    def _pair(self, pid: str) -> tuple[np.ndarray, np.ndarray]:
        if pid in self._cache:
            return self._cache[pid]
        c = self.config
        size = None if c.random_crop else (c.crop, c.crop)
        pair = self.manifest.load_pair(pid, size=size, force_gray=c.channels == 1)
        vis = pair.visible
        if vis.shape[2] != c.channels:
            vis = np.repeat(vis, c.channels, axis=2) if vis.shape[2] == 1 else imgio.to_gray(vis)
        out = (vis, pair.infrared)
        if len(self._cache) < self.cache_limit:
            self._cache[pid] = out
        return out

    def order(self, epoch: int) -> list[str]:
        gen = torch.Generator().manual_seed(self.config.seed * 1_000_003 + epoch)
        perm = torch.randperm(len(self.ids), generator=gen).tolist()
        return [self.ids[i] for i in perm]

    def batch(self, step: int) -> tuple[list[str], torch.Tensor, torch.Tensor]:
        epoch, idx = divmod(step, self.steps_per_epoch)
        bs = self.config.batch_size
        ids = self.order(epoch)[idx * bs:(idx + 1) * bs]
        vis, ir = [], []
        gen = np.random.default_rng([self.config.seed, step])
        for pid in ids:
            v, r = self._pair(pid)
            if self.config.random_crop:
                v, r = _random_crop(v, r, self.config.crop, gen)
            vis.append(np.transpose(v, (2, 0, 1)))
            ir.append(np.transpose(r, (2, 0, 1)))
        dt = self.config.torch_dtype
        return ids, torch.as_tensor(np.stack(vis), dtype=dt), torch.as_tensor(np.stack(ir), dtype=dt)


def _random_crop(v: np.ndarray, r: np.ndarray, crop: int, gen: np.random.Generator):
    h, w = v.shape[:2]
    if h < crop or w < crop:
        s = crop / min(h, w)
        nh, nw = max(crop, round(h * s)), max(crop, round(w * s))
        v, r = imgio.resize(v, nh, nw), imgio.resize(r, nh, nw)
        h, w = nh, nw
    y = int(gen.integers(0, h - crop + 1))
    x = int(gen.integers(0, w - crop + 1))
    return v[y:y + crop, x:x + crop], r[y:y + crop, x:x + crop]


# -- training ------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    decomp: dict[str, float]
    d2s: dict[str, float]
    total: float
    wall_time: float
    ids: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    bundle: ModelBundle
    records: list[StepRecord]
    checkpoint: Path | None
    optimizer: torch.optim.Optimizer


def compute_losses(bundle: ModelBundle, extractor: FeatureExtractor, vis: torch.Tensor, ir: torch.Tensor,
                   config: TrainConfig):
    """Forward pass plus all loss terms; returns ``(total, decomp, d2s)``."""
    dec_v, dec_i, out = run_pair(bundle, vis, ir, config.decompose_input)
    decomp = decomposition_loss(dec_v, dec_i, vis, config.decomp_weights)
    d2s = d2s_loss(extractor, out.fused, vis, ir, config.d2s_weights)
    return total_loss(decomp, d2s, config.lam), decomp, d2s


def make_optimizer(bundle: ModelBundle, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(bundle.parameters(), lr=config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)


def _dump_nonfinite(out_dir: Path | None, step: int, tensors: dict[str, torch.Tensor]) -> Path | None:
    if out_dir is None:
        return None
    path = out_dir / f"nonfinite_step{step}.pt"
    torch.save({k: v.detach().cpu() for k, v in tensors.items()}, path)
    return path


def train(config: TrainConfig, manifest: DatasetManifest, out_dir: str | os.PathLike | None = None,
          extractor: FeatureExtractor | None = None, resume: str | os.PathLike | None = None,
          stop_after: int | None = None,
          on_step: Callable[[StepRecord], None] | None = None) -> TrainResult:
    """Adam over all five networks with the backbone frozen.

    ``resume`` continues from a checkpoint written by an earlier run (network
    weights, Adam moments and step counter). ``stop_after`` ends the run after
    that many global steps even if the schedule is longer.
    """
    if len(manifest) == 0:
        raise ConfigError("training manifest is empty")
    torch.manual_seed(config.seed)
    device, dtype = config.torch_device, config.torch_dtype
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if extractor is None:
        extractor = FeatureExtractor.load(config.backbone)
    extractor = extractor.to(device=device, dtype=dtype)

    batcher = PairBatcher(manifest, config)
    # max_steps, when set, replaces the epoch-based schedule
    total_steps = config.max_steps or config.epochs * batcher.steps_per_epoch
    if stop_after is not None:
        total_steps = min(total_steps, stop_after)

    start = 0
    if resume is not None:
        bundle, manifest_data = load_checkpoint(resume, config.bundle_config)
        bundle = bundle.to(device=device, dtype=dtype)
        optimizer = make_optimizer(bundle, config)
        restore_optimizer(bundle, optimizer, resume)
        start = int(manifest_data["step"])
    else:
        bundle = build_bundle(config.channels, config.hidden, config.seed, config.num_layers)
        bundle = bundle.to(device=device, dtype=dtype)
        optimizer = make_optimizer(bundle, config)
    bundle.train()

    log_fh = open(out / "train_log.jsonl", "a" if resume else "w") if out is not None else None
    records: list[StepRecord] = []
    last_ckpt: Path | None = None
    t0 = time.perf_counter()
    try:
        for step in range(start, total_steps):
            ids, vis, ir = batcher.batch(step)
            vis, ir = vis.to(device), ir.to(device)
            optimizer.zero_grad(set_to_none=True)
            loss, decomp, d2s = compute_losses(bundle, extractor, vis, ir, config)
            if not torch.isfinite(loss):
                dump = _dump_nonfinite(out, step, {"vis": vis, "ir": ir, "loss": loss.detach()})
                raise NumericError(f"non-finite loss at step {step}" + (f"; tensors dumped to {dump}" if dump else ""))
            loss.backward()
            optimizer.step()

            dec_f, d2s_f = decomp.as_floats(), d2s.as_floats()
            rec = StepRecord(step=step, decomp=dec_f, d2s=d2s_f,
                             total=config.lam * dec_f["decomp_total"] + d2s_f["d2s_total"],
                             wall_time=time.perf_counter() - t0, ids=ids)
            records.append(rec)
            if log_fh is not None:
                log_fh.write(rec.to_json() + "\n")
                log_fh.flush()
            if on_step is not None:
                on_step(rec)
            done = step + 1
            if out is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
                last_ckpt = out / f"ckpt_step{done:07d}.safetensors"
                _save(bundle, last_ckpt, config, done, batcher, optimizer)
    finally:
        if log_fh is not None:
            log_fh.close()

    if out is not None:
        last_ckpt = out / "final.safetensors"
        _save(bundle, last_ckpt, config, max(total_steps, start), batcher, optimizer)
    bundle.eval()
    return TrainResult(bundle, records, last_ckpt, optimizer)


def _save(bundle, path, config, step, batcher, optimizer):
    save_checkpoint(bundle, path, epoch=step // batcher.steps_per_epoch, step=step,
                    loss_weights=config.loss_weights(), optimizer=optimizer,
                    extra={"train_config": config.to_dict()})


# -- evaluation and sweep ---------------------------------------------------------

@torch.no_grad()
def fuse_dataset(bundle: ModelBundle, manifest: DatasetManifest, out_dir: str | os.PathLike,
                 decompose_input: str = "raw") -> list[Path]:
    """Fuse every pair at native resolution and write 8-bit PNGs named by id."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = next(bundle.parameters()).dtype
    written = []
    for pid in manifest.pairs:
        pair = manifest.load_pair(pid, force_gray=bundle.channels == 1)
        fused = fuse_pair(bundle, imgio.to_tensor(pair.visible, dtype), imgio.to_tensor(pair.infrared, dtype),
                          decompose_input).fused
        plane = imgio.to_plane(fused)
        if plane.shape[2] == 3:
            plane = imgio.to_gray(plane)
        path = out_dir / f"{pid}.png"
        imgio.save_image(plane, path)
        written.append(path)
    return written


def evaluate_bundle(bundle: ModelBundle, manifest: DatasetManifest, out_dir: str | os.PathLike,
                    decompose_input: str = "raw") -> MetricReport:
    fused_dir = Path(out_dir)
    fuse_dataset(bundle, manifest, fused_dir, decompose_input)
    return evaluate_directory(fused_dir, manifest.root / "vis", manifest.root / "ir")


SWEEP_COLUMNS = ("gamma2", "w_i", "En", "SD", "MI", "Nabf", "status")


def ablation_sweep(grid: dict[str, Iterable[float]], config: TrainConfig, train_manifest: DatasetManifest,
                   out_dir: str | os.PathLike, eval_manifest: DatasetManifest | None = None,
                   extractor: FeatureExtractor | None = None) -> list[dict[str, Any]]:
    """Train and evaluate one bundle per ``(gamma2, w_i)`` cell, same seed each.

    A failing cell is recorded with ``status="failed: ..."`` and empty
    metrics; the sweep continues. Writes ``sweep.csv`` under ``out_dir``.
    """
    out_dir = Path(out_dir)
    eval_manifest = eval_manifest or train_manifest
    if extractor is None:
        extractor = FeatureExtractor.load(config.backbone)
    rows = []
    for g2 in grid["gamma2"]:
        for wi in grid["w_i"]:
            cell_dir = out_dir / f"gamma2_{g2:g}__wi_{wi:g}"
            row: dict[str, Any] = {"gamma2": g2, "w_i": wi}
            try:
                cfg = config.replace(d2s_weights={**dataclasses.asdict(config.d2s_weights),
                                                  "gamma2": float(g2), "w_i": float(wi)})
                result = train(cfg, train_manifest, cell_dir, extractor=extractor)
                report = evaluate_bundle(result.bundle, eval_manifest, cell_dir / "fused", cfg.decompose_input)
                report.write(cell_dir / "metrics.csv")
                agg = report.aggregate
                row.update({"En": agg["en"], "SD": agg["sd"], "MI": agg["mi"], "Nabf": agg["nabf"],
                            "status": "ok"})
            except FusionError as exc:
                log.error("sweep cell gamma2=%s w_i=%s failed: %s", g2, wi, exc)
                row.update({k: "" for k in ("En", "SD", "MI", "Nabf")})
                row["status"] = f"failed: {exc}"
            rows.append(row)
    write_sweep_csv(rows, out_dir / "sweep.csv")
    return rows


def write_sweep_csv(rows: list[dict[str, Any]], path: str | os.PathLike) -> None:
    formatted = []
    for r in rows:
        formatted.append({k: (f"{r[k]:.6f}" if isinstance(r.get(k), float) and k not in ("gamma2", "w_i")
                              else r.get(k, "")) for k in SWEEP_COLUMNS})
    imgio.write_manifest_rows(path, formatted, SWEEP_COLUMNS)


# published full-scale reference values for the TNO test set, default weights
REFERENCE_TNO = {"en": 6.90455, "sd": 89.44478, "mi": 13.80891, "nabf": 0.10570}


def directional_check(aggregate: dict[str, float], tolerance: float = 0.05) -> list[str]:
    """Compare a full-scale run's aggregate against the published reference.

    Not a gate: returns human-readable lines. En and SD are expected within
    ``tolerance`` (relative). MI is reported but not judged, because the
    published MI column equals exactly twice the entropy column, which the
    standard I(vis;F) + I(ir;F) definition does not reproduce.
    """
    lines = []
    for key in ("en", "sd"):
        ref, got = REFERENCE_TNO[key], aggregate[key]
        rel = abs(got - ref) / ref
        verdict = "within" if rel <= tolerance else "outside"
        lines.append(f"{key}: {got:.5f} vs reference {ref:.5f} ({rel:.1%} off, {verdict} ±{tolerance:.0%})")
    lines.append(f"mi: {aggregate['mi']:.5f} vs reference {REFERENCE_TNO['mi']:.5f} "
                 "(not judged: reference MI equals 2 x En, a different definition)")
    lines.append(f"nabf: {aggregate['nabf']:.5f} vs reference {REFERENCE_TNO['nabf']:.5f} (informational)")
    return lines
