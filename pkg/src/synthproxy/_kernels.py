"""Sample-serial inner loops compiled with numba.

Everything here is pure and deterministic: same inputs give bit-identical
outputs.  fastmath stays off so IEEE semantics are preserved.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

# Filter state is clamped so a fast cutoff sweep at high Q cannot launch the
# biquad into overflow; the soft clipper downstream bounds anything audible.
_STATE_LIMIT = 1.0e6


@njit(cache=True)
def biquad_lowpass_sweep(x: np.ndarray, cutoff_hz: np.ndarray, q: float, sr: float) -> np.ndarray:
    """2-pole resonant low-pass with per-sample coefficient update.

    Transposed direct form II; cutoff_hz is a per-sample array already clamped
    to a stable range by the caller.
    """
    n = x.shape[0]
    out = np.empty(n, dtype=np.float64)
    s1 = 0.0
    s2 = 0.0
    for i in range(n):
        w0 = 2.0 * math.pi * cutoff_hz[i] / sr
        cw = math.cos(w0)
        alpha = math.sin(w0) / (2.0 * q)
        a0 = 1.0 + alpha
        b0 = (1.0 - cw) / (2.0 * a0)
        b1 = (1.0 - cw) / a0
        b2 = b0
        a1 = (-2.0 * cw) / a0
        a2 = (1.0 - alpha) / a0
        xi = x[i]
        y = b0 * xi + s1
        s1 = b1 * xi - a1 * y + s2
        s2 = b2 * xi - a2 * y
        if s1 > _STATE_LIMIT:
            s1 = _STATE_LIMIT
        elif s1 < -_STATE_LIMIT:
            s1 = -_STATE_LIMIT
        if s2 > _STATE_LIMIT:
            s2 = _STATE_LIMIT
        elif s2 < -_STATE_LIMIT:
            s2 = -_STATE_LIMIT
        out[i] = y
    return out


@njit(cache=True)
def fm_stack(
    phase_inc: np.ndarray,
    env: np.ndarray,
    levels: np.ndarray,
    mod_matrix: np.ndarray,
    carrier_gain: np.ndarray,
    mod_index: float,
    feedback: float,
    n: int,
) -> np.ndarray:
    """Four-operator phase-modulation stack.

    Operator j (j > i) modulates operator i where ``mod_matrix[i, j]`` is 1;
    operator 3 (the highest) optionally self-modulates via ``feedback`` using
    its previous raw sine sample.  ``carrier_gain`` already folds in the
    1/n_carriers normalization.
    """
    out = np.zeros(n, dtype=np.float64)
    phases = np.zeros(4, dtype=np.float64)
    raw = np.zeros(4, dtype=np.float64)
    prev_fb = 0.0
    for t in range(n):
        for i in range(3, -1, -1):
            m = 0.0
            for j in range(i + 1, 4):
                if mod_matrix[i, j] != 0:
                    m += mod_index * env[j, t] * levels[j] * raw[j]
            if i == 3:
                m += feedback * prev_fb
            raw[i] = math.sin(phases[i] + m)
            phases[i] += phase_inc[i]
        prev_fb = raw[3]
        acc = 0.0
        for i in range(4):
            acc += carrier_gain[i] * env[i, t] * levels[i] * raw[i]
        out[t] = acc
    return out


def warm_up() -> None:
    """Trigger JIT compilation once (e.g. before forking worker processes)."""
    x = np.zeros(4, dtype=np.float64)
    biquad_lowpass_sweep(x, np.full(4, 100.0), 0.7, 16000.0)
    fm_stack(
        np.zeros(4),
        np.zeros((4, 4)),
        np.zeros(4),
        np.zeros((4, 4), dtype=np.int8),
        np.zeros(4),
        1.0,
        0.0,
        4,
    )
