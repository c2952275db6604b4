"""Counter-based random streams keyed by integer tuples.

Every stochastic step in the package draws from ``stream(seed, *keys)`` so
results depend only on the keys, never on call order or platform RNG state.
"""

import numpy as np

# stream tags; arbitrary but fixed
INIT = 0x1A17
SHUFFLE = 0x5F1E
WORLD = 0x3021D
IMAGE = 0x1336E


def stream(*keys):
    """Return a Philox-backed generator keyed by non-negative integers."""
    seq = np.random.SeedSequence([int(k) for k in keys])
    return np.random.Generator(np.random.Philox(seq))
