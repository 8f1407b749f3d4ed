"""Hot numeric kernels with a JIT backend and a pure-numpy fallback.

The only kernel that is actually hot is the fused Adam step over a flat
float32 slice.  When numba is importable (and not disabled) the fused loop
is compiled with ``@njit``; otherwise an order-matched numpy implementation
is used.  Both backends produce bit-identical float32 results because they
perform the same operations in the same order with float32 operands.

Backend selection:

* env var ``OPTISTATE_BACKEND=numpy`` forces the fallback,
* ``OPTISTATE_BACKEND=numba`` requires numba (raises if unavailable),
* unset/``auto``: numba when importable, numpy otherwise.

Half-precision conversions deliberately stay in numpy in both backends:
they are bandwidth-trivial at the sizes we touch and numpy's float16
casts are the reference rounding behaviour we test against.
"""

from __future__ import annotations

import math
import os
import warnings

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env override instead
    njit = None
    HAS_NUMBA = False

_ENV_VAR = "OPTISTATE_BACKEND"


class KernelPerformanceWarning(UserWarning):
    """Emitted when the JIT backend was wanted but is unavailable."""


def _resolve_backend() -> str:
    choice = os.environ.get(_ENV_VAR, "auto").strip().lower()
    if choice in ("", "auto"):
        return "numba" if HAS_NUMBA else "numpy"
    if choice == "numba":
        if not HAS_NUMBA:
            raise RuntimeError(
                f"{_ENV_VAR}=numba requested but numba is not importable"
            )
        return "numba"
    if choice == "numpy":
        return "numpy"
    raise ValueError(f"unrecognised {_ENV_VAR}={choice!r} (use auto|numba|numpy)")


_BACKEND = _resolve_backend()

if _BACKEND == "numpy" and not HAS_NUMBA and os.environ.get(_ENV_VAR, "auto") in (
    "",
    "auto",
):
    warnings.warn(
        "numba is not installed; using the pure-numpy Adam kernel "
        "(identical results, lower throughput)",
        KernelPerformanceWarning,
        stacklevel=2,
    )


def active_backend() -> str:
    """Name of the backend selected at import time ("numba" or "numpy")."""
    return _BACKEND


def _adam_step_numpy(p, m, v, g, lr, beta1, beta2, eps, bc1, bc2):
    # Order matches the jitted loop exactly: m, then v, then the corrected
    # step.  All intermediates stay float32; scalars arrive as np.float32.
    one = np.float32(1.0)
    m[:] = beta1 * m + (one - beta1) * g
    v[:] = beta2 * v + (one - beta2) * (g * g)
    mh = m / bc1
    vh = v / bc2
    p -= (lr * mh) / (np.sqrt(vh) + eps)


if HAS_NUMBA:

    @njit(cache=True)
    def _adam_step_jit(p, m, v, g, lr, beta1, beta2, eps, bc1, bc2):  # pragma: no cover
        one = np.float32(1.0)
        for i in range(p.shape[0]):
            gi = g[i]
            mi = beta1 * m[i] + (one - beta1) * gi
            vi = beta2 * v[i] + (one - beta2) * (gi * gi)
            m[i] = mi
            v[i] = vi
            mh = mi / bc1
            vh = vi / bc2
            p[i] = p[i] - (lr * mh) / (np.sqrt(vh) + eps)

else:
    _adam_step_jit = None


def adam_step_arrays(p, m, v, g, lr, beta1, beta2, eps, step):
    """Fused in-place Adam update on flat float32 arrays.

    ``p``/``m``/``v`` are updated in place; ``g`` is the float32 gradient.
    ``step`` is the 1-based step count used for bias correction.  Bias
    corrections are computed once in float64 and cast to float32 so both
    backends see identical scalar operands.
    """
    if step < 1:
        raise ValueError("step must be >= 1 for bias correction")
    for name, arr in (("p", p), ("m", m), ("v", v), ("g", g)):
        if arr.dtype != np.float32:
            raise TypeError(f"expected float32 for {name}, got {arr.dtype}")
    if not (p.shape == m.shape == v.shape == g.shape):
        raise ValueError("p, m, v, g must share one flat shape")
    bc1 = np.float32(1.0 - math.pow(beta1, step))
    bc2 = np.float32(1.0 - math.pow(beta2, step))
    args = (
        p,
        m,
        v,
        g,
        np.float32(lr),
        np.float32(beta1),
        np.float32(beta2),
        np.float32(eps),
        bc1,
        bc2,
    )
    if _BACKEND == "numba":
        _adam_step_jit(*args)
    else:
        _adam_step_numpy(*args)
