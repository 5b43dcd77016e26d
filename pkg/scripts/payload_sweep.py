#!/usr/bin/env python3
"""Uplink payload accounting across group sizes (metering only, seconds).

Prints the mean per-client activation-byte fraction relative to full
uploads for k in 2..5, under the symmetric Dirichlet ratio sampler.
"""

import sys

import numpy as np

from splitmix.mixing import sample_mixing_counts
from splitmix.rng import RngHub

TOKENS = 16
ROUNDS = 2000


def main(alpha="6.0"):
    alpha = float(alpha)
    hub = RngHub(0)
    print(f"alpha={alpha}, {ROUNDS} rounds, M={TOKENS}")
    for k in range(2, 6):
        fractions = np.zeros(k)
        for r in range(ROUNDS):
            counts = sample_mixing_counts(k, alpha, TOKENS, hub.allocations(r, k))
            fractions += counts / TOKENS
        fractions /= ROUNDS
        spread = ", ".join(f"{f:.3f}" for f in fractions)
        print(f"  k={k}: mean per-client fraction [{spread}] (ideal {1 / k:.3f})")
    return 0


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
