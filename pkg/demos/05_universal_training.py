"""Turbo stages trained for a whole range of SNRs and arrival angles.

Trains a universal chain over randomized scenarios on a 4 x 8 array and
compares it with a dedicated chain at the scenario it was trained for, and
at an SNR neither saw in training.

    python demos/05_universal_training.py
"""

import numpy as np

from turbochan.channel import FixedSource, RandomizedSource, SpatialConfig, build_covariances, make_batch
from turbochan.estimator import analytic_nmse, genie_filter
from turbochan.learning import TrainConfig
from turbochan.turbo import train_universal_chain, turbo_infer, turbo_train


def main():
    spatial = SpatialConfig(M=4, N=8)
    cfg = TrainConfig(max_steps=600)
    dedicated = turbo_train(FixedSource(spatial, 0.0, cfg.window, seed=3), 3, cfg, n_windows=300)
    sector = RandomizedSource(spatial, np.deg2rad((10, 30)), np.deg2rad((40, 60)), (0, 15),
                              window=cfg.window, seed=3)
    universal = train_universal_chain(sector, 3, cfg, n_windows=300)

    cov = build_covariances(spatial, include_full=True)
    for snr in (0.0, 0.7, 7.0):
        b = make_batch(cov, 20_000, snr, seed=11)
        genie = analytic_nmse(genie_filter(cov.full(), b.N0), cov.full(), b.N0)
        d = turbo_infer(dedicated, b.Y, 0.0, H=b.H).trace[-1]["nmse_db"]
        u = turbo_infer(universal, b.Y, snr, H=b.H).trace[-1]["nmse_db"]
        print(f"{snr:4.1f} dB: dedicated (0 dB chain) {d:6.2f}, universal {u:6.2f}, "
              f"genie {genie:6.2f} dB")


if __name__ == "__main__":
    main()
