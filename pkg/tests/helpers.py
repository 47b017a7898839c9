"""Shared test utilities: the central finite-difference gradient oracle and
small fixture builders used across modules."""

from __future__ import annotations

import numpy as np

from hoigraph import autodiff as ad
from hoigraph.geometry import Box, Detection
from hoigraph.providers import appearance_key


def finite_difference_check(build_loss, params, rel_tol: float = 1e-4,
                            h: float = 1e-5, max_coords: int = 32,
                            seed: int = 0) -> float:
    """Compare reverse-mode gradients with central finite differences.

    ``build_loss`` runs a fresh forward pass and returns a scalar Var;
    ``params`` is a list of (name, Var) leaves to check.  For large tensors a
    seeded sample of coordinates is probed.  Returns the worst relative
    error seen and asserts it stays under ``rel_tol``.
    """
    for _, p in params:
        p.grad = None
    loss = build_loss()
    ad.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value))
                for name, p in params}

    rng = np.random.Generator(np.random.Philox(key=seed))
    worst = 0.0
    for name, p in params:
        # probe by assignment, not through a reshaped view: 0-d values may
        # have degraded to numpy scalars, whose reshape is a copy
        base = np.array(p.value, dtype=np.float64)
        n = base.size
        coords = np.arange(n) if n <= max_coords else np.sort(
            rng.choice(n, size=max_coords, replace=False))
        for c in coords:
            orig = base.reshape(-1)[c]
            step = h * max(1.0, abs(orig))
            probe = base.copy()
            probe.reshape(-1)[c] = orig + step
            p.value = probe
            f_plus = float(build_loss().value)
            probe = base.copy()
            probe.reshape(-1)[c] = orig - step
            p.value = probe
            f_minus = float(build_loss().value)
            p.value = base
            fd = (f_plus - f_minus) / (2.0 * step)
            an = float(analytic[name].reshape(-1)[c])
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            if err > worst:
                worst = err
            assert err < rel_tol, (
                f"gradient mismatch for {name}[{c}]: analytic={an!r} fd={fd!r} err={err:.3e}")
    return worst


def det(x1, y1, x2, y2, category=0, score=0.9, key="img", index=0) -> Detection:
    return Detection(box=Box(x1, y1, x2, y2), category=category, score=score,
                     appearance_key=appearance_key(key, index))
