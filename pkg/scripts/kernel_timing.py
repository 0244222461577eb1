"""Wall-clock comparison of dense vs inward-window attention on one head."""

import argparse
import time

import numpy as np

from freeswim.attention import AttentionScale, HeadTensors, dense_attention, windowed_attention
from freeswim.grid import TokenGrid
from freeswim.window_mask import WindowSpec, sparsity


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--window", default="16x8", help="WxH window extents")
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--repeats", type=int, default=3)
    args = p.parse_args()
    window = WindowSpec.parse(args.window)
    scale = AttentionScale.inverse_sqrt(args.head_dim)
    rng = np.random.default_rng(0)
    print(f"{'grid':>10} {'tokens':>7} {'sparsity':>9} {'dense s':>9} {'window s':>9}")
    for h, w in [(9, 17), (18, 34), (27, 51), (36, 68)]:
        grid = TokenGrid(1, h, w)
        n = grid.token_count
        t = HeadTensors(*(rng.standard_normal((n, args.head_dim)) for _ in range(3)))
        dense = best_of(lambda: dense_attention(t, scale), args.repeats)
        win = best_of(lambda: windowed_attention(t, window, grid, scale), args.repeats)
        print(f"{str(grid):>10} {n:>7} {float(sparsity(window, grid)):>9.4f} {dense:>9.4f} {win:>9.4f}")


if __name__ == "__main__":
    main()
