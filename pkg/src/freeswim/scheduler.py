"""Flow-matching denoising loops: plain CFG and the cached dual-path loop.

State convention: ``x_sigma = (1 - sigma) * x0 + sigma * noise``. The model
predicts the velocity ``dx/dsigma``, and each Euler step moves ``x`` by
``(sigma_next - sigma) * v``.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import AttentionScale
from .dit_block import FULL, CrossOutputs, LatentField, ModelWeights, TextContext, predict_velocity
from .window_mask import WindowSpec, sparsity


@dataclass(frozen=True)
class ScheduleSpec:
    num_steps: int = 50
    flow_shift: float = 9.0
    strength: float = 0.7
    guidance_scale: float = 5.0

    def __post_init__(self):
        if isinstance(self.num_steps, bool) or not isinstance(self.num_steps, int) or self.num_steps < 1:
            raise ValueError(f"num_steps must be a positive integer, got {self.num_steps!r}")
        if not self.flow_shift > 0:
            raise ValueError(f"flow_shift must be positive, got {self.flow_shift!r}")
        if not 0 < self.strength <= 1:
            raise ValueError(f"strength must lie in (0, 1], got {self.strength!r}")
        if not self.guidance_scale >= 0:
            raise ValueError(f"guidance_scale must be non-negative, got {self.guidance_scale!r}")


@dataclass(frozen=True)
class DualPathConfig:
    window: WindowSpec
    lam: float = 1.0
    cache_period: int = 2
    dual_path_on_uncond: bool = False

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam!r}")
        if isinstance(self.cache_period, bool) or not isinstance(self.cache_period, int) or self.cache_period < 1:
            raise ValueError(f"cache_period must be a positive integer, got {self.cache_period!r}")


@dataclass
class CacheState:
    cached: CrossOutputs | None = None
    refreshed_at_step: int | None = None

    def store(self, outputs: CrossOutputs, step: int) -> None:
        self.cached = outputs
        self.refreshed_at_step = step


@dataclass
class StepRecord:
    step: int
    sigma: float
    sigma_next: float
    refreshed: bool
    cond_refreshed_at: int | None
    uncond_refreshed_at: int | None
    full_forwards: int
    window_forwards: int
    seconds_full: float
    seconds_window: float
    self_attention_flops: int


@dataclass
class RunTrace:
    start_step: int
    steps: list[StepRecord] = field(default_factory=list)

    @property
    def full_forwards_cond(self) -> int:
        return sum(s.refreshed for s in self.steps)

    @property
    def full_forwards(self) -> int:
        return sum(s.full_forwards for s in self.steps)

    def to_dict(self) -> dict:
        return {"start_step": self.start_step, "steps": [asdict(s) for s in self.steps]}


def sigma_schedule(spec: ScheduleSpec) -> np.ndarray:
    """``num_steps + 1`` shifted noise levels running from 1 down to 0."""
    u = np.linspace(1.0, 0.0, spec.num_steps + 1)
    s = spec.flow_shift
    sigmas = s * u / (1.0 + (s - 1.0) * u)
    sigmas[0], sigmas[-1] = 1.0, 0.0
    return sigmas


def start_step(spec: ScheduleSpec) -> int:
    # round half up; at least one refinement step always runs
    return min(math.floor(spec.num_steps * (1.0 - spec.strength) + 0.5), spec.num_steps - 1)


def add_noise(latent: LatentField, sigma: float, noise: np.ndarray) -> LatentField:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != latent.values.shape:
        raise ValueError(f"noise shape {noise.shape} does not match latent {latent.values.shape}")
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"sigma must lie in [0, 1], got {sigma!r}")
    if sigma == 0.0:
        return LatentField(latent.values.copy())
    if sigma == 1.0:
        return LatentField(noise.copy())
    return LatentField((1.0 - sigma) * latent.values + sigma * noise)


def should_refresh(step_offset: int, period: int) -> bool:
    return step_offset % period == 0


def self_attention_flops(grid, window: WindowSpec | None, weights: ModelWeights) -> int:
    """QK^T plus weighted-V multiply-adds (x2) over all heads and blocks of one forward."""
    cfg = weights.config
    full = 2 * grid.token_count ** 2 * cfg.head_dim * cfg.heads * cfg.blocks * 2
    if window is None:
        return full
    frac = sparsity(window, grid)
    return full * frac.numerator // frac.denominator


def _cfg(v_uncond: np.ndarray, v_cond: np.ndarray, guidance: float) -> np.ndarray:
    return v_uncond + guidance * (v_cond - v_uncond)


def denoise_full(noisy: LatentField, text: TextContext, null_text: TextContext, spec: ScheduleSpec,
                 weights: ModelWeights, scale: AttentionScale, first_step: int | None = None) -> tuple[LatentField, RunTrace]:
    """Plain full-attention CFG denoiser from ``first_step`` to the end."""
    sigmas = sigma_schedule(spec)
    first = start_step(spec) if first_step is None else first_step
    trace = RunTrace(first)
    x = noisy.values
    flops = self_attention_flops(noisy.grid, None, weights)
    for i in range(first, spec.num_steps):
        t0 = time.perf_counter()
        state = LatentField(x)
        v_cond, _ = predict_velocity(state, sigmas[i], text, weights, FULL, scale)
        v_uncond, _ = predict_velocity(state, sigmas[i], null_text, weights, FULL, scale)
        x = x + (sigmas[i + 1] - sigmas[i]) * _cfg(v_uncond, v_cond, spec.guidance_scale)
        trace.steps.append(StepRecord(i, float(sigmas[i]), float(sigmas[i + 1]), False, None, None, 2, 0,
                                      time.perf_counter() - t0, 0.0, 2 * flops))
    return LatentField(x), trace


def denoise_window_only(noisy: LatentField, text: TextContext, null_text: TextContext, spec: ScheduleSpec,
                        window: WindowSpec, weights: ModelWeights, scale: AttentionScale) -> tuple[LatentField, RunTrace]:
    """Window-attention CFG denoiser with no full branch at all."""
    sigmas = sigma_schedule(spec)
    first = start_step(spec)
    trace = RunTrace(first)
    x = noisy.values
    flops = self_attention_flops(noisy.grid, window, weights)
    for i in range(first, spec.num_steps):
        t0 = time.perf_counter()
        state = LatentField(x)
        v_cond, _ = predict_velocity(state, sigmas[i], text, weights, window, scale)
        v_uncond, _ = predict_velocity(state, sigmas[i], null_text, weights, window, scale)
        x = x + (sigmas[i + 1] - sigmas[i]) * _cfg(v_uncond, v_cond, spec.guidance_scale)
        trace.steps.append(StepRecord(i, float(sigmas[i]), float(sigmas[i + 1]), False, None, None, 0, 2,
                                      0.0, time.perf_counter() - t0, 2 * flops))
    return LatentField(x), trace


def denoise_dual_path(noisy: LatentField, text: TextContext, null_text: TextContext, spec: ScheduleSpec,
                      config: DualPathConfig, weights: ModelWeights, scale: AttentionScale,
                      use_cache: bool = True) -> tuple[LatentField, RunTrace]:
    """Dual-path refinement from ``start_step(spec)``.

    On refresh steps (every ``cache_period`` steps, counted from the first
    refinement step) a full-attention forward of the current latent yields
    per-block cross outputs. These are cached and used to override the
    window branch's cross outputs until the next refresh. The unconditional
    pass stays window-only unless ``config.dual_path_on_uncond`` is set.
    ``use_cache=False`` recomputes the full branch every step and never
    touches a cache.
    """
    sigmas = sigma_schedule(spec)
    first = start_step(spec)
    trace = RunTrace(first)
    grid = noisy.grid
    full_flops = self_attention_flops(grid, None, weights)
    window_flops = self_attention_flops(grid, config.window, weights)
    caches = {"cond": CacheState(), "uncond": CacheState()}
    x = noisy.values

    for i in range(first, spec.num_steps):
        refresh = not use_cache or should_refresh(i - first, config.cache_period)
        state = LatentField(x)
        seconds_full = seconds_window = 0.0
        full_forwards = window_forwards = 0
        velocities = {}
        for name, ctx in (("cond", text), ("uncond", null_text)):
            dual = name == "cond" or config.dual_path_on_uncond
            source = None
            if dual:
                cache = caches[name]
                if refresh:
                    t0 = time.perf_counter()
                    _, fresh = predict_velocity(state, sigmas[i], ctx, weights, FULL, scale)
                    seconds_full += time.perf_counter() - t0
                    full_forwards += 1
                    if use_cache:
                        cache.store(fresh, i)
                    source = fresh
                else:
                    source = cache.cached
                if use_cache:
                    assert cache.refreshed_at_step is not None
                    assert i - cache.refreshed_at_step <= config.cache_period - 1, "stale cache"
            t0 = time.perf_counter()
            velocities[name], _ = predict_velocity(state, sigmas[i], ctx, weights, config.window, scale,
                                                   override_source=source, lam=config.lam)
            seconds_window += time.perf_counter() - t0
            window_forwards += 1

        x = x + (sigmas[i + 1] - sigmas[i]) * _cfg(velocities["uncond"], velocities["cond"], spec.guidance_scale)
        if not np.isfinite(x).all():
            raise FloatingPointError(f"non-finite latent after step {i}")
        trace.steps.append(StepRecord(
            step=i, sigma=float(sigmas[i]), sigma_next=float(sigmas[i + 1]), refreshed=refresh,
            cond_refreshed_at=caches["cond"].refreshed_at_step if use_cache else i,
            uncond_refreshed_at=(caches["uncond"].refreshed_at_step if use_cache else i)
            if config.dual_path_on_uncond else None,
            full_forwards=full_forwards, window_forwards=window_forwards,
            seconds_full=seconds_full, seconds_window=seconds_window,
            self_attention_flops=full_forwards * full_flops + window_forwards * window_flops,
        ))
    return LatentField(x), trace


def expected_refreshes(refinement_steps: int, period: int) -> int:
    return math.ceil(refinement_steps / period)
