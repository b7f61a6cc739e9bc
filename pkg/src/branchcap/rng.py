"""Counter-based random numbers for reproducible parallel Monte Carlo.

Every random draw is a pure function of integer keys (master seed, sample
index, vertex counter, channel).  Scheduling, batching and thread counts
therefore cannot change any estimate: the same (seed, config) always
replays bit-for-bit.

The mixer is the splitmix64 finalizer chained over the keys.  It is not
cryptographic, but its equidistribution is far beyond what these Monte
Carlo estimates can resolve.
"""

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# channel tags keep draws for different purposes out of each other's streams
CH_OFFSPRING = 0x01
CH_STEP = 0x02
CH_SPINE = 0x03
CH_ROOT = 0x04


def _mix(h):
    h = np.uint64(h) if np.isscalar(h) else h
    h ^= h >> np.uint64(30)
    h *= _M1
    h ^= h >> np.uint64(27)
    h *= _M2
    h ^= h >> np.uint64(31)
    return h


def counter_u64(*keys):
    """Hash integer keys (scalars or broadcastable uint64 arrays) to uint64."""
    with np.errstate(over="ignore"):
        h = np.uint64(0x243F6A8885A308D3)
        for k in keys:
            h = _mix((h + np.asarray(k, dtype=np.uint64)) * _GAMMA)
        return _mix(h)


def counter_uniform(*keys):
    """Uniform floats in (0, 1], reproducible from the keys alone."""
    u = counter_u64(*keys)
    # 53-bit mantissa; +1 keeps 0 out so log(u) is always finite
    return (np.asarray(u >> np.uint64(11), dtype=np.float64) + 1.0) * (2.0 ** -53)


def spawn_generator(*keys):
    """A numpy Generator whose stream is keyed by (seed, index, ...)."""
    key = np.asarray([counter_u64(*keys, 0), counter_u64(*keys, 1)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
