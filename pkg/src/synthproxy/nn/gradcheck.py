"""Finite-difference verification of analytic gradients.

Run models in float64 (``Module.astype(np.float64)``) before checking; the
default central-difference step of 1e-5 then resolves well below the 1e-4
acceptance threshold.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from synthproxy.nn.tensor import Tensor


def grad_check(
    build_loss: Callable[[], Tensor],
    blocks: Mapping[str, Tensor],
    step: float = 1e-5,
) -> dict[str, float]:
    """Max relative error per named parameter block.

    ``build_loss`` must rebuild the scalar loss from scratch on every call so
    perturbed parameter values are actually consumed.  Relative error for a
    block is ``max|analytic - numeric| / max(max|numeric|, max|analytic|,
    1e-8)``.  A block where both sides vanish (inf-norms <= 1e-8) reports
    0.0: such directions are exactly flat (a bias feeding a train-mode batch
    norm), central differences only return float residue there, and a real
    defect cannot hide in them because a wrongly-zero analytic gradient on a
    live direction shows up through the numeric side.
    """
    for t in blocks.values():
        t.grad = None
    loss = build_loss()
    if loss.data.size != 1:
        raise ValueError("grad_check needs a scalar loss")
    loss.backward()
    analytic = {
        name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        for name, t in blocks.items()
    }

    report: dict[str, float] = {}
    for name, t in blocks.items():
        numeric = np.zeros_like(t.data)
        # index element-wise so non-contiguous parameter arrays still see
        # the perturbation (flat views would silently copy)
        for i in range(t.data.size):
            ix = np.unravel_index(i, t.data.shape)
            keep = t.data[ix]
            t.data[ix] = keep + step
            up = float(build_loss().data)
            t.data[ix] = keep - step
            down = float(build_loss().data)
            t.data[ix] = keep
            numeric[ix] = (up - down) / (2.0 * step)
        diff = np.max(np.abs(analytic[name] - numeric))
        a_norm = float(np.max(np.abs(analytic[name])))
        n_norm = float(np.max(np.abs(numeric)))
        if a_norm <= 1e-8 and n_norm <= 1e-8:
            report[name] = 0.0
        else:
            report[name] = float(diff / max(n_norm, a_norm, 1e-8))
    return report
