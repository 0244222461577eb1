"""Coarse-to-fine pipeline driver, config handling, FLOPs estimate, reports.

Stage 1 runs full attention from pure noise at the native grid. Stage 2
upsamples the result to the target grid in latent space, re-noises it at
the strength-derived start step, and refines it with the dual-path loop.

Config files are plain ``key = value`` lines. ``#`` starts a comment and
keys are the long CLI flag names with underscores (see README).
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .attention import AttentionScale, entropy_scale
from .dit_block import LatentField, ModelConfig, ModelWeights, TextContext
from .grid import TokenGrid
from .scheduler import (
    DualPathConfig,
    RunTrace,
    ScheduleSpec,
    add_noise,
    denoise_dual_path,
    denoise_full,
    sigma_schedule,
    start_step,
)
from .window_mask import WindowSpec, sparsity

SCHEMA_VERSION = "1"
REPORT_DIR_ENV = "FREESWIM_REPORT_DIR"
SCALE_MODES = ("inverse-sqrt-d", "entropy")
UPSAMPLE_METHODS = ("nearest", "trilinear")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    parse.__name__ = "one of " + "|".join(options)
    return parse


# key -> (parser, default, type description); None default means required or derived
FIELDS = {
    "native_grid": (TokenGrid.parse, None, "grid FxHxW"),
    "target_grid": (TokenGrid.parse, None, "grid FxHxW"),
    "window": (WindowSpec.parse, None, "window WxH (even)"),
    "steps": (int, 50, "integer"),
    "strength": (float, 0.7, "float"),
    "guidance_scale": (float, 5.0, "float"),
    "flow_shift": (float, 9.0, "float"),
    "lambda": (float, 1.0, "float"),
    "cache_period": (int, 2, "integer"),
    "dual_path_on_uncond": (_parse_bool, False, "boolean"),
    "scale_mode": (_choice(SCALE_MODES), "inverse-sqrt-d", "one of " + "|".join(SCALE_MODES)),
    "weight_seed": (int, 0, "integer"),
    "noise_seed": (int, 0, "integer"),
    "upsample": (_choice(UPSAMPLE_METHODS), "nearest", "one of " + "|".join(UPSAMPLE_METHODS)),
    "report": (str, None, "path"),
    "bench_only": (_parse_bool, False, "boolean"),
    "model_dim": (int, 32, "integer"),
    "head_dim": (int, 8, "integer"),
    "heads": (int, 4, "integer"),
    "blocks": (int, 2, "integer"),
    "text_len": (int, 8, "integer"),
    "text_dim": (int, 16, "integer"),
    "channels": (int, 4, "integer"),
}
REQUIRED = ("native_grid", "target_grid")


@dataclass(frozen=True)
class PipelineConfig:
    native_grid: TokenGrid
    target_grid: TokenGrid
    window: WindowSpec
    schedule: ScheduleSpec
    dual_path: DualPathConfig
    model: ModelConfig
    weight_seed: int = 0
    noise_seed: int = 0
    scale_mode: str = "inverse-sqrt-d"
    upsample: str = "nearest"
    report: str | None = None
    bench_only: bool = False
    defaults_applied: tuple[str, ...] = ()

    def echo(self) -> dict:
        return {
            "native_grid": str(self.native_grid),
            "target_grid": str(self.target_grid),
            "window": str(self.window),
            "steps": self.schedule.num_steps,
            "strength": self.schedule.strength,
            "guidance_scale": self.schedule.guidance_scale,
            "flow_shift": self.schedule.flow_shift,
            "lambda": self.dual_path.lam,
            "cache_period": self.dual_path.cache_period,
            "dual_path_on_uncond": self.dual_path.dual_path_on_uncond,
            "scale_mode": self.scale_mode,
            "weight_seed": self.weight_seed,
            "noise_seed": self.noise_seed,
            "upsample": self.upsample,
            "bench_only": self.bench_only,
            "model_dim": self.model.model_dim,
            "head_dim": self.model.head_dim,
            "heads": self.model.heads,
            "blocks": self.model.blocks,
            "text_len": self.model.text_len,
            "text_dim": self.model.text_dim,
            "channels": self.model.channels,
            "defaults_applied": list(self.defaults_applied),
        }


def default_window(native: TokenGrid) -> WindowSpec:
    """Native spatial extents, each rounded down to even (minimum 2)."""
    return WindowSpec(max(2, native.width - native.width % 2), max(2, native.height - native.height % 2))


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    raw = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key.replace("-", "_")] = value
    return raw


def parse_config(path: str | os.PathLike | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Build a config from an optional file plus overrides (overrides win).

    Override values may be strings (as from the command line) or already
    typed values.
    """
    raw: dict = read_config_file(path) if path is not None else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key.replace("-", "_")] = value

    values, defaults = {}, []
    for key, value in raw.items():
        if key not in FIELDS:
            raise ConfigError(f"unknown config key '{key}'", key)
        parser, _, expected = FIELDS[key]
        if isinstance(value, str):
            try:
                value = parser(value)
            except ValueError as exc:
                raise ConfigError(f"config key '{key}': expected {expected} ({exc})", key) from None
        values[key] = value
    for key in REQUIRED:
        if key not in values:
            raise ConfigError(f"missing required config key '{key}'", key)
    for key, (_, default, _) in FIELDS.items():
        if key not in values and default is not None:
            values[key] = default
            defaults.append(key)
    if "window" not in values:
        try:
            values["window"] = default_window(values["native_grid"])
        except ValueError as exc:
            raise ConfigError(f"config key 'window': {exc}", "window") from None
        defaults.append("window")

    native, target = values["native_grid"], values["target_grid"]
    if target.frames != native.frames:
        raise ConfigError("target_grid frames must equal native_grid frames (temporal axis stays native)", "target_grid")
    if target.height < native.height or target.width < native.width:
        raise ConfigError("target_grid must be at least native_grid along each spatial axis", "target_grid")

    key = None
    try:
        key = "steps"
        schedule = ScheduleSpec(values["steps"], values["flow_shift"], values["strength"], values["guidance_scale"])
        key = "lambda"
        dual = DualPathConfig(values["window"], values["lambda"], values["cache_period"], values["dual_path_on_uncond"])
        key = "model_dim"
        model = ModelConfig(values["model_dim"], values["head_dim"], values["heads"], values["blocks"],
                            values["text_len"], values["text_dim"], values["channels"])
    except ValueError as exc:
        raise ConfigError(str(exc), key) from None
    return PipelineConfig(
        native_grid=native, target_grid=target, window=values["window"], schedule=schedule, dual_path=dual,
        model=model, weight_seed=values["weight_seed"], noise_seed=values["noise_seed"],
        scale_mode=values["scale_mode"], upsample=values["upsample"], report=values.get("report"),
        bench_only=values["bench_only"], defaults_applied=tuple(defaults),
    )


def _resample_axis(values: np.ndarray, axis: int, new_size: int, method: str) -> np.ndarray:
    old = values.shape[axis]
    if old == new_size:
        return values
    if method == "nearest":
        return np.take(values, (np.arange(new_size) * old) // new_size, axis=axis)
    # linear, half-pixel centers, edge-clamped
    pos = np.clip((np.arange(new_size) + 0.5) * old / new_size - 0.5, 0.0, old - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, old - 1)
    shape = [1] * values.ndim
    shape[axis] = new_size
    frac = (pos - lo).reshape(shape)
    a = np.take(values, lo, axis=axis)
    b = np.take(values, hi, axis=axis)
    return a + frac * (b - a)


def upsample_latent(latent: LatentField, target: TokenGrid, method: str = "nearest") -> LatentField:
    """Spatial upsampling per frame and channel; ``trilinear`` keeps frames fixed."""
    if method not in UPSAMPLE_METHODS:
        raise ValueError(f"unknown upsample method {method!r}")
    src = latent.grid
    if target.frames != src.frames:
        raise ValueError(f"frame count must be preserved ({src.frames} -> {target.frames})")
    if target.height < src.height or target.width < src.width:
        raise ValueError(f"cannot downsample {src} -> {target}")
    values = _resample_axis(latent.values, 1, target.height, method)
    values = _resample_axis(values, 2, target.width, method)
    return LatentField(values.copy())


@dataclass(frozen=True)
class FlopsEstimate:
    full_flops: int
    window_flops: Fraction
    ratio: Fraction


def flops_estimate(grid: TokenGrid, window: WindowSpec, head_dim: int, heads: int, blocks: int) -> FlopsEstimate:
    """Self-attention FLOPs for QK^T and weighted-V, full vs inward window."""
    full = 2 * grid.token_count ** 2 * head_dim * heads * blocks * 2
    ratio = sparsity(window, grid)
    return FlopsEstimate(full, full * ratio, ratio)


def stage2_scale(config: PipelineConfig) -> AttentionScale:
    if config.scale_mode == "entropy":
        return entropy_scale(config.native_grid.token_count, config.target_grid.token_count, config.model.head_dim)
    return AttentionScale.inverse_sqrt(config.model.head_dim)


def latent_checksum(latent: LatentField) -> str:
    return hashlib.sha256(np.ascontiguousarray(latent.values, dtype="<f8").tobytes()).hexdigest()


@dataclass
class Report:
    config: dict
    mask: dict
    flops: dict
    refreshes: dict | None = None
    timing: dict | None = None
    checksum: str | None = None
    schema_version: str = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "config": self.config,
            "mask": self.mask,
            "flops": self.flops,
            "refreshes": self.refreshes,
            "timing": self.timing,
            "final_latent_sha256": self.checksum,
        }

    def deterministic_dict(self) -> dict:
        out = self.to_dict()
        out.pop("timing")
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def write_report(report: Report, path: str | os.PathLike) -> Path:
    """Write atomically: a failed write never leaves a partial report."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(report.to_json())
    os.replace(tmp, path)
    return path


@dataclass
class PipelineRun:
    """Everything produced by one two-stage run, for inspection and tests."""

    report: Report
    weights: ModelWeights | None = None
    text: TextContext | None = None
    null_text: TextContext | None = None
    coarse: LatentField | None = None
    noisy: LatentField | None = None
    final: LatentField | None = None
    trace: RunTrace | None = None
    stage2_scale: AttentionScale | None = None


def _bench_sections(config: PipelineConfig) -> tuple[dict, dict]:
    frac = sparsity(config.window, config.target_grid)
    est = flops_estimate(config.target_grid, config.window, config.model.head_dim, config.model.heads,
                         config.model.blocks)
    mask = {"sparsity": str(frac), "sparsity_float": float(frac),
            "keys_per_query_per_frame": frac.numerator * config.target_grid.spatial_count // frac.denominator}
    flops = {"self_attention_full": est.full_flops, "self_attention_window": float(est.window_flops),
             "ratio": str(est.ratio), "ratio_float": float(est.ratio), "reduction_factor": float(1 / est.ratio)}
    return mask, flops


def execute(config: PipelineConfig) -> PipelineRun:
    """Run both stages; overflow or invalid arithmetic raises FloatingPointError."""
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        return _execute(config)


def _execute(config: PipelineConfig) -> PipelineRun:
    mask, flops = _bench_sections(config)
    report = Report(config=config.echo(), mask=mask, flops=flops)
    if config.bench_only:
        return PipelineRun(report)

    t_start = time.perf_counter()
    cfg = config.model
    weights = ModelWeights.generate(cfg, config.weight_seed)
    text = TextContext.random(cfg, [config.noise_seed, 1])
    null_text = TextContext.random(cfg, [config.noise_seed, 2])

    native = config.native_grid
    noise = np.random.default_rng([config.noise_seed, 0]).standard_normal(native.shape + (cfg.channels,))
    coarse_spec = ScheduleSpec(config.schedule.num_steps, config.schedule.flow_shift, 1.0,
                               config.schedule.guidance_scale)
    t0 = time.perf_counter()
    coarse, _ = denoise_full(LatentField(noise), text, null_text, coarse_spec, weights,
                             AttentionScale.inverse_sqrt(cfg.head_dim), first_step=0)
    seconds_stage1 = time.perf_counter() - t0

    target = config.target_grid
    upsampled = upsample_latent(coarse, target, config.upsample)
    first = start_step(config.schedule)
    sigma0 = float(sigma_schedule(config.schedule)[first])
    noise2 = np.random.default_rng([config.noise_seed, 3]).standard_normal(target.shape + (cfg.channels,))
    noisy = add_noise(upsampled, sigma0, noise2)
    scale = stage2_scale(config)
    t0 = time.perf_counter()
    final, trace = denoise_dual_path(noisy, text, null_text, config.schedule, config.dual_path, weights, scale)
    seconds_stage2 = time.perf_counter() - t0

    n_steps = len(trace.steps)
    report.refreshes = {
        "refinement_steps": n_steps,
        "start_step": first,
        "start_sigma": sigma0,
        "full_branch_refreshes": trace.full_forwards_cond,
        "full_forwards_total": trace.full_forwards,
        "full_forwards_per_step": trace.full_forwards / n_steps,
        "naive_full_forwards_per_step": 2,
        "refreshed_at": [s.cond_refreshed_at for s in trace.steps],
        "attention_scale": scale.value,
    }
    report.timing = {
        "unit": "seconds",
        "stage1": seconds_stage1,
        "stage2": seconds_stage2,
        "end_to_end": time.perf_counter() - t_start,
        "per_step": [{"step": s.step, "full_branch": s.seconds_full, "window_branch": s.seconds_window}
                     for s in trace.steps],
    }
    report.checksum = latent_checksum(final)
    return PipelineRun(report, weights, text, null_text, coarse, noisy, final, trace, scale)


def run_pipeline(config: PipelineConfig) -> Report:
    return execute(config).report


def refine_full_reference(run: PipelineRun, config: PipelineConfig) -> LatentField:
    """Plain full-attention SDEdit refinement of the same noisy start."""
    final, _ = denoise_full(run.noisy, run.text, run.null_text, config.schedule, run.weights, run.stage2_scale)
    return final
