#!/usr/bin/env python3
"""Overlap-size trade-off: eval counts and predicted relative throughput.

Runs the temporal-aggregation baseline at S in {0, 4, 8, 15} over a
144-frame video (L=16, 25 DDIM steps, 16x12 latents) and compares the
FLOP-model throughput ratios against the reference FPS-derived ratios
(1.176/1.544, 0.801/1.544, 0.104/1.544).
"""

import argparse
import time

from shiftcache.denoiser import ToyDenoiser, ToyDenoiserConfig
from shiftcache.metrics import throughput_model
from shiftcache.scheduler import EngineConfig, run_inference

REFERENCE_FPS = {0: 1.544, 4: 1.176, 8: 0.801, 15: 0.104}


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n-total", type=int, default=144)
    parser.add_argument("--steps", type=int, default=25)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    toy = ToyDenoiserConfig(shallow_width=4, deep_width=8, deep_blocks=4)
    denoiser = ToyDenoiser(toy)
    print(f"{'S':>3} {'chunks/step':>12} {'wall_s':>8} {'pred_ratio':>11} "
          f"{'ref_ratio':>10} {'diff%':>6}")
    for s in (0, 4, 8, 15):
        cfg = EngineConfig(n_total=args.n_total, chunk_len=16, policy="overlap",
                           overlap_s=s, partial_fraction=0.0, ddim_steps=args.steps,
                           seed=args.seed, latent_h=16, latent_w=12, toy=toy)
        t0 = time.perf_counter()
        _, stats = run_inference(cfg)
        wall = time.perf_counter() - t0
        ratio = throughput_model(stats, denoiser)
        ref = REFERENCE_FPS[s] / REFERENCE_FPS[0]
        diff = abs(ratio / ref - 1.0) * 100
        print(f"{s:>3} {stats.full_chunk_evals // args.steps:>12} {wall:>8.2f} "
              f"{ratio:>11.4f} {ref:>10.4f} {diff:>5.1f}%")


if __name__ == "__main__":
    main()
