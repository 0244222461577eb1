"""Closed-form sweep: self-attention FLOPs ratio and full-branch work per step.

Token grids use the /16 pixel convention of Wan-like models (832x480 -> 52x30).
"""

import argparse
import math

from freeswim.grid import TokenGrid
from freeswim.pipeline import flops_estimate
from freeswim.scheduler import ScheduleSpec, start_step
from freeswim.window_mask import WindowSpec

TARGETS = {
    "480P": (30, 52),
    "720P": (45, 80),
    "1080P": (68, 120),
    "2K": (90, 160),
    "4K": (135, 240),
}


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--native", default="30x52", help="native HxW token grid")
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--periods", default="1,2,4,8")
    args = p.parse_args()
    nh, nw = (int(v) for v in args.native.split("x"))
    window = WindowSpec(nw - nw % 2, nh - nh % 2)
    spec = ScheduleSpec()
    steps = spec.num_steps - start_step(spec)
    periods = [int(v) for v in args.periods.split(",")]

    print(f"window {window}, {steps} refinement steps, head_dim 128 x 40 heads x 40 blocks (FLOPs scale only)")
    print(f"{'target':>6} {'grid':>9} {'ratio':>16} {'reduction':>9}  " +
          "  ".join(f"P={p} fwd/step" for p in periods))
    for name, (h, w) in TARGETS.items():
        grid = TokenGrid(args.frames, h, w)
        est = flops_estimate(grid, window, 128, 40, 40)
        per_step = "  ".join(f"{math.ceil(steps / p) / steps:>12.3f}" for p in periods)
        print(f"{name:>6} {h:>4}x{w:<4} {str(est.ratio):>16} {float(1 / est.ratio):>8.2f}x  {per_step}")
    print("naive dual-path CFG: 2.000 full-attention forwards per step")


if __name__ == "__main__":
    main()
