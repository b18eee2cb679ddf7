"""Learning the subspace filters from data.

Trains the vertical and horizontal networks on windows of noisy
observations and compares the learned filters with the closed-form ones.
A 4 x 8 array keeps the run under a minute; pass --full for 8 x 16.

    python demos/03_train_subspace_networks.py [--full]
"""

import argparse

import numpy as np

from turbochan.channel import FixedSource, SpatialConfig, make_batch
from turbochan.estimator import FilterPair, estimate_arithmetic, nmse, subspace_filters
from turbochan.learning import TrainConfig, sample_covariance, train_dedicated


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--full", action="store_true")
    args = ap.parse_args()
    spatial = SpatialConfig() if args.full else SpatialConfig(M=4, N=8)
    cfg = TrainConfig(max_steps=1500 if args.full else 600)
    source = FixedSource(spatial, snr_db=0.0, window=cfg.window, seed=1)

    models = {}
    for sub in ("v", "h"):
        models[sub] = train_dedicated(source, cfg, sub, n_windows=400)
        conv = models[sub].meta["convergence"]
        print(f"{sub}: {models[sub].meta['steps']} steps, residual {conv['residual']:.4f} "
              f"vs noise {conv['noise_energy']:.4f}, within noise: {conv['within_noise']}")

    b = make_batch(source.cov, 256, 0.0, seed=99)
    cols = np.swapaxes(b.Y, 1, 2).reshape(-1, spatial.M)
    rows = b.Y.reshape(-1, spatial.N)
    learned = FilterPair(models["v"].filter(sample_covariance(cols)),
                         models["h"].filter(sample_covariance(rows)), b.N0, "learned")
    closed = subspace_filters(source.cov, b.N0)
    print(f"arithmetic NMSE, learned filters: {nmse(estimate_arithmetic(learned, b.Y), b.H):.2f} dB")
    print(f"arithmetic NMSE, closed form:     {nmse(estimate_arithmetic(closed, b.Y), b.H):.2f} dB")


if __name__ == "__main__":
    main()
