"""Counter-based random streams.

Every path in an ensemble owns an independent Philox stream keyed by
``(seed, path_id)``.  The i-th double drawn from that stream is a pure
function of ``(seed, path_id, i)``, so a path's randomness does not depend on
which worker runs it or in which order paths are scheduled.  Simulators map
"step n, lane j" to draw index ``n * lanes + j``.
"""

from __future__ import annotations

import numpy as np

_U64 = (1 << 64) - 1


def path_key(seed: int, path_id: int) -> int:
    """128-bit Philox key for one path."""
    if seed < 0 or path_id < 0:
        raise ValueError("seed and path_id must be non-negative")
    return ((seed & _U64) << 64) | (path_id & _U64)


def path_generator(seed: int, path_id: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=path_key(seed, path_id)))


def path_uniforms(seed: int, path_id: int, n_steps: int, lanes: int = 1) -> np.ndarray:
    """Uniforms on [0, 1) for ``n_steps`` steps.

    Returns shape ``(n_steps,)`` when ``lanes == 1`` and ``(n_steps, lanes)``
    otherwise.
    """
    u = path_generator(seed, path_id).random(n_steps * lanes)
    if lanes == 1:
        return u
    return u.reshape(n_steps, lanes)
