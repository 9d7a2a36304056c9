"""Held-out evaluation, tiled generation, latency benchmarks, ablations.

All evaluation draws derive from explicit seeds so reports reproduce
bit-for-bit (wall-clock metadata aside). Variants evaluated on the same
bucket share the same held-out batches, which makes base-vs-adapted
comparisons paired rather than merely statistical.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .adapters import ResAdapterBundle, StyleLoRABundle, effective_param_map
from .data import SyntheticDataset
from .diffusion import DiffusionSchedule, SamplerConfig, cfg_predict, ddim_denoise, simple_loss
from .errors import ConfigError, ShapeError
from .tensor import Tensor
from .unet import UNetModel, model_fingerprint, unet_forward

__all__ = [
    "EvalRow", "EvalReport", "multires_eval", "ablation_grid",
    "tile_layout", "tiled_generate", "bench_latency",
    "style_shift", "make_style_probes",
]

HELDOUT_METRIC = "heldout_simple_loss"


@dataclass(frozen=True)
class EvalRow:
    bucket: tuple[int, int]
    variant: str
    metric: str
    value: float

    def to_json(self) -> str:
        return json.dumps({
            "bucket": f"{self.bucket[0]}x{self.bucket[1]}",
            "variant": self.variant,
            "metric": self.metric,
            "value": self.value,
        }, sort_keys=True)


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, row: EvalRow) -> None:
        key = (row.bucket, row.variant, row.metric)
        if any((r.bucket, r.variant, r.metric) == key for r in self.rows):
            raise ConfigError(f"duplicate report row {key}")
        self.rows.append(row)

    def value(self, bucket: tuple[int, int], variant: str, metric: str = HELDOUT_METRIC) -> float:
        for r in self.rows:
            if (r.bucket, r.variant, r.metric) == (bucket, variant, metric):
                return r.value
        raise KeyError((bucket, variant, metric))

    def jsonl(self) -> str:
        head = json.dumps({"metadata": self.metadata}, sort_keys=True)
        return "\n".join([head] + [r.to_json() for r in self.rows])

    def table(self) -> str:
        headers = ("bucket", "variant", "metric", "value")
        cells = [(f"{r.bucket[0]}x{r.bucket[1]}", r.variant, r.metric, f"{r.value:.6g}")
                 for r in self.rows]
        widths = [max(len(h), *(len(c[i]) for c in cells)) if cells else len(h)
                  for i, h in enumerate(headers)]
        def fmt(row):
            return "  ".join(str(v).ljust(w) for v, w in zip(row, widths))
        return "\n".join([fmt(headers), fmt(["-" * w for w in widths])] + [fmt(c) for c in cells])


def _variant_name(bundle) -> str:
    if isinstance(bundle, ResAdapterBundle):
        return "base+resadapter"
    if isinstance(bundle, StyleLoRABundle):
        return "base+style-lora"
    raise ConfigError(f"unknown bundle type {type(bundle).__name__}")


def _heldout_batches(dataset: SyntheticDataset, bucket: tuple[int, int], n_batches: int,
                     batch_size: int, seed: int, timesteps: int):
    h, w = bucket
    rng = np.random.default_rng([seed, h, w])
    batches = []
    for _ in range(n_batches):
        classes = rng.integers(0, dataset.num_classes, size=batch_size)
        imgs = np.stack([dataset.render(int(k), h, w, rng) for k in classes])
        t = rng.integers(1, timesteps + 1, size=batch_size)
        eps = rng.standard_normal(imgs.shape)
        batches.append((Tensor(imgs), classes.astype(np.intp), t, Tensor(eps)))
    return batches


def _eval_variants(model, variants, schedule, dataset, buckets, n_batches, seed,
                   batch_size, forward, report: EvalReport) -> None:
    for bucket in buckets:
        batches = _heldout_batches(dataset, tuple(bucket), n_batches, batch_size, seed,
                                   schedule.timesteps)
        for name, params in variants:
            losses = [
                simple_loss(model, x0, t, eps, c, schedule, params=params, forward=forward).item()
                for x0, c, t, eps in batches
            ]
            report.add(EvalRow(tuple(bucket), name, HELDOUT_METRIC, float(np.mean(losses))))


def multires_eval(model: UNetModel, bundle, schedule: DiffusionSchedule,
                  dataset: SyntheticDataset, buckets, n_batches: int = 4, seed: int = 0,
                  batch_size: int = 4, forward=unet_forward) -> EvalReport:
    """Mean held-out noise-prediction loss per bucket, base and adapted variants."""
    if not buckets:
        raise ConfigError("multires_eval: empty bucket list")
    dataset.validate()
    started = time.time()
    variants = [("base", None)]
    if bundle is not None:
        variants.append((_variant_name(bundle), effective_param_map(model, bundle)))
    report = EvalReport(metadata={
        "seed": seed,
        "fingerprint": model_fingerprint(model),
        "n_batches": n_batches,
        "batch_size": batch_size,
    })
    _eval_variants(model, variants, schedule, dataset, [tuple(b) for b in buckets],
                   n_batches, seed, batch_size, forward, report)
    report.metadata["wall_clock_s"] = time.time() - started
    return report


def ablation_grid(model: UNetModel, bundle: ResAdapterBundle, modes, alphas,
                  schedule: DiffusionSchedule, dataset: SyntheticDataset, buckets,
                  n_batches: int = 4, seed: int = 0, batch_size: int = 4,
                  forward=unet_forward) -> EvalReport:
    """Held-out loss for every (adapter subset, alpha) cell plus one base row."""
    modes = [frozenset(m) for m in modes]
    if not modes or not alphas:
        raise ConfigError("ablation_grid: modes and alphas must be non-empty")
    started = time.time()
    variants = [("base", None)]
    for mode in modes:
        restricted = bundle.restricted(mode)
        label = "+".join(sorted(mode)) if mode else "none"
        for alpha in alphas:
            cell = restricted.with_alpha(float(alpha))
            variants.append((
                f"base+resadapter[{label}]@alpha={float(alpha):g}",
                effective_param_map(model, cell),
            ))
    report = EvalReport(metadata={"seed": seed, "fingerprint": model_fingerprint(model)})
    _eval_variants(model, variants, schedule, dataset, [tuple(b) for b in buckets],
                   n_batches, seed, batch_size, forward, report)
    report.metadata["wall_clock_s"] = time.time() - started
    return report


# ---------------------------------------------------------------------------
# tiled generation


def tile_layout(target: tuple[int, int], tile: tuple[int, int], overlap: int):
    """Tile origins covering the target and the per-pixel coverage counts."""
    th, tw = target
    h, w = tile
    if h > th or w > tw:
        raise ShapeError(f"tile {h}x{w} larger than target {th}x{tw}")
    if overlap < 0 or overlap >= min(h, w):
        raise ConfigError(f"overlap must be in [0, min(tile)), got {overlap}")

    def axis_positions(full: int, span: int) -> list[int]:
        stride = span - overlap
        positions = list(range(0, full - span + 1, stride))
        if positions[-1] != full - span:
            positions.append(full - span)
        return positions

    origins = [(y, x) for y in axis_positions(th, h) for x in axis_positions(tw, w)]
    counts = np.zeros((th, tw))
    for y, x in origins:
        counts[y : y + h, x : x + w] += 1.0
    return origins, counts


def tiled_generate(model: UNetModel, schedule: DiffusionSchedule, target: tuple[int, int],
                   tile: tuple[int, int], overlap: int, cfg: SamplerConfig, c,
                   params=None, forward=unet_forward) -> Tensor:
    """Sample at ``target`` by blending per-tile predictions each DDIM step.

    Predictions from overlapping tiles are averaged uniformly (sum divided by
    coverage count), so blend weights sum to one at every pixel by
    construction. With target == tile and overlap 0 this reduces bitwise to
    ddim_sample.
    """
    cfg.validate()
    origins, counts = tile_layout(target, tile, overlap)
    th, tw = target
    h, w = tile
    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal((1, model.config.in_channels, th, tw))

    def predict(arr: np.ndarray, t: int) -> np.ndarray:
        acc = np.zeros_like(arr)
        for y, xo in origins:
            patch = Tensor(np.ascontiguousarray(arr[:, :, y : y + h, xo : xo + w]))
            eps = cfg_predict(model, patch, t, c, cfg.guidance_scale, params, forward).data
            acc[:, :, y : y + h, xo : xo + w] += eps
        return acc / counts

    return Tensor(ddim_denoise(x, predict, schedule, cfg.steps, cfg.eta, rng))


def bench_latency(model: UNetModel, bundle, target: tuple[int, int], tile: tuple[int, int],
                  overlap: int, cfg: SamplerConfig, c, schedule: DiffusionSchedule,
                  repeats: int = 3, forward=unet_forward) -> dict:
    """Median wall-clock of direct generation at target vs tile-and-blend."""
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    from .diffusion import ddim_sample

    params = effective_param_map(model, bundle) if bundle is not None else None
    shape = (1, model.config.in_channels, target[0], target[1])

    def run_direct():
        ddim_sample(model, shape, cfg, c, schedule, params=params, forward=forward)

    def run_tiled():
        tiled_generate(model, schedule, target, tile, overlap, cfg, c, forward=forward)

    def timed(fn):
        samples = []
        for _ in range(repeats):
            start = time.perf_counter()
            fn()
            samples.append((time.perf_counter() - start) * 1e3)
        return samples

    direct = timed(run_direct)
    tiled = timed(run_tiled)
    return {
        "direct_ms": float(np.median(direct)),
        "tiled_ms": float(np.median(tiled)),
        "ratio": float(np.median(tiled) / np.median(direct)),
        "direct_runs_ms": direct,
        "tiled_runs_ms": tiled,
        "repeats": repeats,
    }


# ---------------------------------------------------------------------------
# style-shift comparison


def make_style_probes(dataset: SyntheticDataset, schedule: DiffusionSchedule,
                      resolution: int, n: int, seed: int, channels: int = 1):
    """Noised in-style images at the standard resolution, for shift probes."""
    rng = np.random.default_rng(seed)
    probes = []
    for _ in range(n):
        k = int(rng.integers(0, dataset.num_classes))
        x0 = dataset.render(k, resolution, resolution, rng)[None]
        t = int(rng.integers(1, schedule.timesteps + 1))
        eps = rng.standard_normal(x0.shape)
        ab = schedule.alpha_bar_at(t)
        x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
        probes.append((Tensor(x_t), t, np.array([k])))
    return probes


def style_shift(model: UNetModel, bundle_a, bundle_b, probe_inputs,
                forward=unet_forward) -> tuple[float, float]:
    """Mean relative L2 output shift caused by each bundle on the probes."""
    if not probe_inputs:
        raise ConfigError("style_shift: need at least one probe input")

    def shift(bundle) -> float:
        params = effective_param_map(model, bundle)
        rel = []
        for x, t, c in probe_inputs:
            base = forward(model, x, t, c).data
            adapted = forward(model, x, t, c, params).data
            denom = max(float(np.linalg.norm(base)), 1e-12)
            rel.append(float(np.linalg.norm(adapted - base)) / denom)
        return float(np.mean(rel))

    return shift(bundle_a), shift(bundle_b)
