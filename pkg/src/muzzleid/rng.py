"""Deterministic seed derivation and parameter-initialization streams.

Weight init uses a counter-based splitmix64 stream so that identical
(seed, shape) pairs produce bit-identical values on every platform,
independent of numpy's generator internals.
"""

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed, n, offset=0):
    """Return n pseudo-random uint64 values for the given seed.

    Output i is a pure function of (seed, offset + i), so arbitrary
    sub-streams can be generated without sequential state.
    """
    idx = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed) + idx * _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
    return z


def derive_seed(seed, *words):
    """Derive a child seed from a parent seed and integer labels."""
    z = np.uint64(seed)
    for w in words:
        z = splitmix64(z + np.uint64(w), 1)[0]
    return int(z)


def uniforms(seed, n, offset=0):
    """n float64 values in [0, 1), bit-deterministic for (seed, offset)."""
    bits = splitmix64(seed, n, offset)
    return (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def normals(seed, n):
    """n standard-normal float64 values via Box-Muller on splitmix64."""
    m = (n + 1) // 2
    u1 = uniforms(seed, m, offset=0)
    u2 = uniforms(seed, m, offset=m)
    u1 = np.maximum(u1, 2.0 ** -53)  # keep log finite
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * m, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n]
