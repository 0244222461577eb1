from fractions import Fraction

import numpy as np
import pytest

from freeswim.dit_block import ModelConfig, ModelWeights, TextContext


def eq1_literal(q, k, w, h, W, H):
    """Boundary-shift rule evaluated with Fractions, independent of the library."""
    (yq, xq), (yk, xk) = q, k
    half_w, half_h = Fraction(w, 2), Fraction(h, 2)
    dw = max(half_w - xq, half_w + xq - W + 1, 0)
    dh = max(half_h - yq, half_h + yq - H + 1, 0)
    return abs(xq - xk) <= half_w + dw and abs(yq - yk) <= half_h + dh


def straight_line_attention(q, k, v, scale, mask=None):
    """Per-query loop with explicit exp/sum; the dense oracle."""
    n_q = q.shape[0]
    out = np.zeros((n_q, v.shape[1]))
    for i in range(n_q):
        allowed = [j for j in range(k.shape[0]) if mask is None or mask[i][j]]
        logits = [scale * sum(float(q[i, c]) * float(k[j, c]) for c in range(q.shape[1])) for j in allowed]
        peak = max(logits)
        ws = [np.exp(l - peak) for l in logits]
        total = sum(ws)
        for w_, j in zip(ws, allowed):
            out[i] += (w_ / total) * v[j]
    return out


@pytest.fixture
def tiny_config():
    return ModelConfig(model_dim=16, head_dim=4, heads=4, blocks=2, text_len=3, text_dim=6, channels=3)


@pytest.fixture
def tiny_weights(tiny_config):
    return ModelWeights.generate(tiny_config, seed=7)


@pytest.fixture
def texts(tiny_config):
    return TextContext.random(tiny_config, 11), TextContext.random(tiny_config, 12)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_c" in nodeid and rep.when == "call":
                name = nodeid.split("::")[-1][len("test_"):]
                num, _, label = name.partition("_")
                lines.append((int(num[1:]), f"criterion {num[1:]} {label}: {'PASS' if outcome == 'passed' else 'FAIL'}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
