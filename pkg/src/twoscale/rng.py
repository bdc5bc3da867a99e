"""Counter-based Gaussian noise.

Every random number is a pure function of ``(seed, path, step, channel)``, so a
path can be regenerated in isolation, in any batch, on any worker, and produce
the same bits. The mixer is the SplitMix64 finalizer applied to a keyed counter.
"""

import numpy as np

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_STREAM_BITS = 20
_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0

# channel layout: normals use channels [0, NORMAL_CHANNELS), auxiliary uniforms above
UNIFORM_BASE = 1 << 18


def _mix(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _as_u64(values):
    return np.asarray(values, dtype=np.int64).astype(np.uint64)


class CounterNoise:
    """Stateless noise source keyed by a master seed.

    Parameters
    ----------
    seed : int
        Master seed. Non-negative and below 2**63.
    """

    def __init__(self, seed):
        seed = int(seed)
        if seed < 0 or seed >= 2**63:
            raise ValueError("seed must lie in [0, 2**63)")
        self.seed = seed
        self._key = _mix(np.array([seed], dtype=np.uint64) ^ _GOLDEN)[0]

    def _path_keys(self, paths):
        with np.errstate(over="ignore"):
            return _mix(self._key + _as_u64(paths) * _GOLDEN)

    def _bits(self, paths, steps, channels, half):
        """Raw 64-bit words, shape ``(len(steps), len(paths), len(channels))``."""
        steps = _as_u64(steps)
        channels = _as_u64(channels)
        counter = (steps[:, None] << np.uint64(_STREAM_BITS + 1)) | (channels[None, :] << np.uint64(1)) | np.uint64(half)
        with np.errstate(over="ignore"):
            ctr = _mix(counter * _GOLDEN + np.uint64(1))
            keys = self._path_keys(paths)
            return _mix(keys[None, :, None] ^ ctr[:, None, :])

    def _unit(self, paths, steps, channels, half):
        words = self._bits(paths, steps, channels, half)
        return ((words >> _S11).astype(np.float64) + 0.5) * _INV_2_53

    def normals(self, paths, step_start, n_steps, dim):
        """Standard normals of shape ``(n_steps, len(paths), dim)``.

        Entry ``[k, i, j]`` depends only on ``(seed, paths[i], step_start + k, j)``.
        """
        steps = np.arange(step_start, step_start + n_steps, dtype=np.int64)
        channels = np.arange(dim, dtype=np.int64)
        u1 = self._unit(paths, steps, channels, 0)
        u2 = self._unit(paths, steps, channels, 1)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)

    def uniforms(self, paths, step_start, n_steps, stream=0):
        """Open-interval uniforms of shape ``(n_steps, len(paths))`` on an auxiliary stream."""
        steps = np.arange(step_start, step_start + n_steps, dtype=np.int64)
        channels = np.array([UNIFORM_BASE + stream], dtype=np.int64)
        return self._unit(paths, steps, channels, 0)[:, :, 0]


def as_noise(noise_or_seed):
    """Accept either a noise source or an integer seed."""
    if hasattr(noise_or_seed, "normals"):
        return noise_or_seed
    return CounterNoise(noise_or_seed)
