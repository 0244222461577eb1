"""Exit criteria. Run alone with ``pytest tests/test_acceptance.py``; the
terminal summary prints one PASS/FAIL line per criterion."""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from freeswim.attention import AttentionScale, HeadTensors, dense_attention, masked_dense_attention, windowed_attention
from freeswim.dit_block import FULL, LatentField, ModelConfig, ModelWeights, TextContext, model_forward, override_cross
from freeswim.grid import TokenGrid
from freeswim.pipeline import execute, parse_config, refine_full_reference, run_pipeline
from freeswim.scheduler import DualPathConfig, ScheduleSpec, denoise_dual_path, start_step
from freeswim.window_mask import WindowSpec, broadcast_mask, key_interval, mask_entry, materialize_mask

EXTENTS = (2, 4, 6)


def test_c1_mask_oracle_equivalence():
    t0 = time.perf_counter()
    pairs = 0
    for H in range(3, 13):
        for W in range(3, 13):
            grid = TokenGrid(1, H, W)
            coords = [(y, x) for y in range(H) for x in range(W)]
            for w in EXTENTS:
                for h in EXTENTS:
                    window = WindowSpec(w, h)
                    for q in coords:
                        iv = key_interval(q, window, grid)
                        members = [iv.y_lo <= y <= iv.y_hi and iv.x_lo <= x <= iv.x_hi for y, x in coords]
                        assert [mask_entry(q, k, window, grid) for k in coords] == members, (H, W, w, h, q)
                        pairs += len(coords)
    elapsed = time.perf_counter() - t0
    assert pairs == 9 * sum(h * h for h in range(3, 13)) ** 2
    assert elapsed < 10.0, f"exhaustive check took {elapsed:.1f}s"


def test_c2_constant_receptive_field():
    for H in range(3, 13):
        for W in range(3, 13):
            grid = TokenGrid(1, H, W)
            for w in EXTENTS:
                for h in EXTENTS:
                    if W < w + 1 or H < h + 1:
                        continue
                    window = WindowSpec(w, h)
                    counts = materialize_mask(window, grid).sum(axis=1)
                    assert (counts == (w + 1) * (h + 1)).all()
                    for y in range(H):
                        for x in range(W):
                            assert key_interval((y, x), window, grid).size == (w + 1) * (h + 1)


def _rel_err(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def test_c3_kernel_equivalence_chain():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    for i in range(24):
        f, h, w = int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        d = int(rng.integers(1, 17))
        grid = TokenGrid(f, h, w)
        window = WindowSpec(int(rng.choice(EXTENTS)), int(rng.choice(EXTENTS)))
        n = grid.token_count
        t = HeadTensors(rng.standard_normal((n, d)), rng.standard_normal((n, d)), rng.standard_normal((n, d)))
        scale = AttentionScale.inverse_sqrt(d)
        win = windowed_attention(t, window, grid, scale)
        ref = masked_dense_attention(t, broadcast_mask(materialize_mask(window, grid), f), scale)
        assert _rel_err(win, ref) <= 1e-5, i
        cover = WindowSpec(w + (w % 2), h + (h % 2))
        assert _rel_err(windowed_attention(t, cover, grid, scale), dense_attention(t, scale)) <= 1e-6, i
    assert time.perf_counter() - t0 < 30.0


def test_c4_locality():
    rng = np.random.default_rng(99)
    for probe in range(12):
        grid = TokenGrid(int(rng.integers(1, 3)), int(rng.integers(5, 9)), int(rng.integers(5, 9)))
        window = WindowSpec(2, int(rng.choice([2, 4])))
        n, d = grid.token_count, 4
        t = HeadTensors(rng.standard_normal((n, d)), rng.standard_normal((n, d)), rng.standard_normal((n, d)))
        scale = AttentionScale(0.5)
        base = windowed_attention(t, window, grid, scale)
        qi = int(rng.integers(n))
        qy, qx = divmod(qi % grid.spatial_count, grid.width)
        iv = key_interval((qy, qx), window, grid)
        outside = [j for j in range(n) if not iv.contains(*divmod(j % grid.spatial_count, grid.width))]
        assert outside
        v = t.v.copy()
        v[outside] = rng.standard_normal((len(outside), d)) * 1e3
        out = windowed_attention(HeadTensors(t.q, t.k, v), window, grid, scale)
        assert np.array_equal(out[qi], base[qi]), probe


def test_c5_override_contract():
    cfg = ModelConfig()
    weights = ModelWeights.generate(cfg, 5)
    rng = np.random.default_rng(5)
    text = TextContext.random(cfg, 6)
    x = LatentField(rng.standard_normal((1, 8, 8, cfg.model_dim)))
    scale, window = AttentionScale.inverse_sqrt(cfg.head_dim), WindowSpec(2, 2)
    _, full_cross = model_forward(x, text, weights, FULL, scale)
    plain_window, _ = model_forward(x, text, weights, window, scale)
    _, used = model_forward(x, text, weights, window, scale, override_source=full_cross, lam=1.0)
    for u, f in zip(used.fields, full_cross.fields):
        assert np.array_equal(u, f)
    zero, _ = model_forward(x, text, weights, window, scale, override_source=full_cross, lam=0.0)
    assert np.array_equal(zero.values, plain_window.values)
    a, b = rng.standard_normal((8, 8, 32)), rng.standard_normal((8, 8, 32))
    for lam in (0.2, 0.5, 0.8):
        eps = 1e-4
        deriv = (override_cross(a, b, lam + eps) - override_cross(a, b, lam - eps)) / (2 * eps)
        np.testing.assert_allclose(deriv, b - a, atol=1e-6)
        np.testing.assert_allclose(override_cross(a, b, lam), a + lam * (b - a), atol=1e-6)


@pytest.fixture(scope="module")
def toy():
    cfg = ModelConfig(model_dim=16, head_dim=4, heads=4, blocks=2, text_len=4, text_dim=8, channels=2)
    weights = ModelWeights.generate(cfg, 1)
    rng = np.random.default_rng(1)
    text, null = TextContext.random(cfg, 2), TextContext.random(cfg, 3)
    return cfg, weights, text, null, rng


def test_c6_cache_transparency(toy):
    cfg, weights, text, null, rng = toy
    grid = TokenGrid(1, 4, 5)
    spec = ScheduleSpec()  # 50 steps, strength 0.7
    assert spec.num_steps - start_step(spec) == 35
    x = LatentField(rng.standard_normal(grid.shape + (cfg.channels,)))
    scale = AttentionScale.inverse_sqrt(cfg.head_dim)
    one = DualPathConfig(WindowSpec(2, 2), cache_period=1)
    cached, _ = denoise_dual_path(x, text, null, spec, one, weights, scale)
    uncached, _ = denoise_dual_path(x, text, null, spec, one, weights, scale, use_cache=False)
    assert np.array_equal(cached.values, uncached.values)
    for period, expected in ((2, 18), (5, 7), (8, 5)):
        _, trace = denoise_dual_path(x, text, null, spec, DualPathConfig(WindowSpec(2, 2), cache_period=period),
                                     weights, scale)
        assert trace.full_forwards_cond == expected
        assert trace.full_forwards == expected  # unconditional pass stays window-only
        assert max(s.step - s.cond_refreshed_at for s in trace.steps) <= period - 1


def test_c7_pipeline_degeneracy():
    config = parse_config(overrides={"native_grid": "1x6x8", "target_grid": "1x6x8", "lambda": 1.0,
                                     "cache_period": 1, "dual_path_on_uncond": True})
    assert config.window.covers(config.target_grid)
    run = execute(config)
    reference = refine_full_reference(run, config)
    assert float(np.abs(run.final.values - reference.values).max()) <= 1e-6


def test_c8_compute_saving_structure(toy):
    report = run_pipeline(parse_config(overrides={"native_grid": "1x30x52", "target_grid": "1x68x120",
                                                  "bench_only": True})).to_dict()
    assert Fraction(report["flops"]["ratio"]) == Fraction(1643, 8160)
    assert report["flops"]["ratio_float"] == 1643 / 8160
    assert report["mask"]["sparsity"] == report["flops"]["ratio"]

    cfg, weights, text, null, rng = toy
    grid = TokenGrid(1, 3, 4)
    x = LatentField(rng.standard_normal(grid.shape + (cfg.channels,)))
    scale = AttentionScale.inverse_sqrt(cfg.head_dim)
    window = WindowSpec(2, 2)
    naive_cfg = DualPathConfig(window, cache_period=1, dual_path_on_uncond=True)
    ours_cfg = DualPathConfig(window, cache_period=2, dual_path_on_uncond=False)
    for strength in (1.0, 0.7):
        spec = ScheduleSpec(strength=strength)
        _, naive = denoise_dual_path(x, text, null, spec, naive_cfg, weights, scale)
        _, ours = denoise_dual_path(x, text, null, spec, ours_cfg, weights, scale)
        steps = len(ours.steps)
        assert naive.full_forwards / steps == 2
        assert ours.full_forwards == math.ceil(steps / 2)
        if steps % 2 == 0:
            assert ours.full_forwards / steps == 0.5
        else:
            assert ours.full_forwards / steps - 0.5 == pytest.approx(0.5 / steps)


def test_c9_determinism(request):
    overrides = {"native_grid": "1x4x6", "target_grid": "1x6x10", "steps": 12, "cache_period": 2,
                 "weight_seed": 3, "noise_seed": 4}
    first = run_pipeline(parse_config(overrides=overrides))
    second = run_pipeline(parse_config(overrides=overrides))
    assert first.checksum == second.checksum
    assert first.deterministic_dict() == second.deterministic_dict()
    previous = request.config.cache.get("freeswim/acceptance_checksum", None)
    if previous is not None:
        assert previous == first.checksum, "checksum changed since the previous suite run"
    request.config.cache.set("freeswim/acceptance_checksum", first.checksum)
