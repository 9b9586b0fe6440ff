#!/usr/bin/env python3
"""How many OFDM symbols until the block-average transmit power is trustworthy.

Prints the smallest block length whose concentration bound drops below the
target, per modulation, next to a Monte-Carlo estimate of the same event.
Equal-energy QPSK never deviates; denser QAM needs longer blocks.
"""

import argparse

from igenet.estimator import (DeviationBoundInputs, deviation_threshold, empirical_deviation_probability,
                              tx_power_deviation_bound)
from igenet.waveform import qam


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--delta", type=float, default=0.01, help="relative power tolerance")
    ap.add_argument("--target", type=float, default=0.01)
    ap.add_argument("--trials", type=int, default=2000)
    args = ap.parse_args()

    print(f"tolerance {args.delta}, target probability {args.target}")
    print("modulation  threshold N_k   bound@25   empirical@25")
    for q in (4, 16, 64, 256):
        c = qam(q)
        n = deviation_threshold(c, args.target, args.delta)
        ub = tx_power_deviation_bound(DeviationBoundInputs.from_constellation(c, n_k=25, delta=args.delta))
        emp = empirical_deviation_probability(c, 25, args.delta, trials=args.trials)
        print(f"{q:>4}-QAM   {n:>12}   {ub:9.4f}   {emp:12.4f}")


if __name__ == "__main__":
    main()
