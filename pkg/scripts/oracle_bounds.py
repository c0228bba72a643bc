"""How much can any estimator gain on the desk-scale blends?

Prints, per seeded 64x64 pair, the PSNR of the blend against T and the gain of
two oracle estimators that peek at the ground truth:

  alpha-R   I - a * (R - mean R) with the best scalar a on a grid
  zero-mean I minus the whole zero-mean reflection-dependent part (I - 0.8 T)

Usage: python3 scripts/oracle_bounds.py [--count 10]
"""

import argparse

import numpy as np

from sirrkit.formation import BlendParams, synthesize_blend
from sirrkit.metrics import psnr
from sirrkit.scenes import layer_pair


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--count", type=int, default=10)
    args = ap.parse_args()
    params = BlendParams(0.8, 0.4)
    wins = dict.fromkeys(("alpha-R", "zero-mean"), 0)
    print(f"{'seed':>4} {'PSNR(I,T)':>10} {'alpha-R':>8} {'zero-mean':>10}")
    for seed in range(args.count):
        t, r = layer_pair(seed)
        i = synthesize_blend(t, r, params)
        base = psnr(i, t)
        rz = r - r.mean(axis=(0, 1))
        alpha = max(psnr(np.clip(i - a * rz, 0, 1), t) for a in np.linspace(0, 0.6, 61)) - base
        extra = i - params.gamma1 * t
        zm = np.clip(i - (extra - extra.mean(axis=(0, 1))), 0, 1)
        zero_mean = psnr(zm, t) - base
        for k, g in (("alpha-R", alpha), ("zero-mean", zero_mean)):
            wins[k] += g >= 1.0
        print(f"{seed:>4} {base:>10.2f} {alpha:>+8.2f} {zero_mean:>+10.2f}")
    print("instances with >= 1 dB gain: " + ", ".join(f"{k} {v}/{args.count}" for k, v in wins.items()))


if __name__ == "__main__":
    main()
