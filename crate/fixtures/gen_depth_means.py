"""Per-pixel mean depth of a sole and a collective run, 64x48 pixels.

The collective minus sole difference over pixels valid in both runs is
scaled to the target mean and sample standard deviation. Empty cells are
invalid pixels. Run from this directory to regenerate.
"""
import csv

import numpy as np

W, H = 64, 48


def generate(path, mean, std, seed, base):
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:H, 0:W]
    sole = base + 0.004 * rows + 0.001 * cols + rng.normal(0.0, 0.002, (H, W))
    valid_sole = rng.random((H, W)) > 0.03
    valid_coll = rng.random((H, W)) > 0.03
    both = valid_sole & valid_coll
    z = rng.standard_t(5, (H, W))
    zb = z[both]
    d = np.zeros((H, W))
    d[both] = mean + std * (zb - zb.mean()) / zb.std(ddof=1)
    coll = sole + d
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["pixel", "sole_mean", "collective_mean"])
        for r in range(H):
            for c in range(W):
                w.writerow([
                    r * W + c,
                    f"{sole[r, c]:.9f}" if valid_sole[r, c] else "",
                    f"{coll[r, c]:.9f}" if valid_coll[r, c] else "",
                ])


generate("depth_means_front.csv", -0.0057, 0.0332, 11, 1.2)
generate("depth_means_up.csv", -0.0001, 0.0840, 12, 2.6)
