"""Keyed random substreams.

Every random draw in a run comes from ``substream(seed, purpose, *keys)``, so
results never depend on the order in which independent pieces are evaluated.
"""

import numpy as np

INIT_DENSITY = 1
INIT_VMAX = 2
MODEL_NOISE = 3
DENSITY_PERTURB = 4
VMAX_WALK = 5
SPEED_PERTURB = 6
LOOP_EMIT = 10
PROBE_EMIT = 11
DRONE_EMIT = 12


def substream(seed, purpose, *keys) -> np.random.Generator:
    entropy = [int(seed), int(purpose), *(int(k) for k in keys)]
    if any(e < 0 for e in entropy):
        raise ValueError(f"substream keys must be non-negative, got {entropy}")
    return np.random.default_rng(np.random.SeedSequence(entropy))
