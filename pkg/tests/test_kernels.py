from __future__ import annotations

import math
import os
import subprocess
import sys

import numpy as np
import pytest

from optistate import kernels
from optistate.kernels import HAS_NUMBA, active_backend, adam_step_arrays


def _rand_state(n, seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(0, 0.02, n).astype(np.float32)
    m = rng.normal(0, 1e-3, n).astype(np.float32)
    v = (rng.random(n) * 1e-4).astype(np.float32)
    g = rng.normal(0, 1.0, n).astype(np.float32)
    return p, m, v, g


def test_active_backend_is_known():
    assert active_backend() in ("numba", "numpy")


def test_backend_env_flag_forces_numpy():
    code = (
        "import optistate.kernels as k\n"
        "assert k.active_backend() == 'numpy'\n"
    )
    env = dict(os.environ, OPTISTATE_BACKEND="numpy")
    subprocess.run([sys.executable, "-c", code], check=True, env=env)


def test_backend_env_flag_rejects_unknown():
    code = "import optistate.kernels"
    env = dict(os.environ, OPTISTATE_BACKEND="cuda")
    proc = subprocess.run(
        [sys.executable, "-c", code], capture_output=True, text=True, env=env
    )
    assert proc.returncode != 0
    assert "OPTISTATE_BACKEND" in proc.stderr


@pytest.mark.skipif(not HAS_NUMBA, reason="numba not installed")
def test_jit_and_numpy_paths_bit_identical():
    for n, seed in [(1, 0), (7, 1), (1024, 2), (4097, 3)]:
        p1, m1, v1, g = _rand_state(n, seed)
        p2, m2, v2 = p1.copy(), m1.copy(), v1.copy()
        lr = np.float32(1e-3)
        b1 = np.float32(0.9)
        b2 = np.float32(0.999)
        eps = np.float32(1e-8)
        bc1 = np.float32(1.0 - 0.9**3)
        bc2 = np.float32(1.0 - 0.999**3)
        kernels._adam_step_numpy(p1, m1, v1, g, lr, b1, b2, eps, bc1, bc2)
        kernels._adam_step_jit(p2, m2, v2, g, lr, b1, b2, eps, bc1, bc2)
        assert p1.tobytes() == p2.tobytes()
        assert m1.tobytes() == m2.tobytes()
        assert v1.tobytes() == v2.tobytes()


def test_matches_scalar_reference():
    # Hand-rolled scalar walk of the same update, quantizing every
    # intermediate to float32 exactly as the array kernels do.
    p, m, v, g = _rand_state(16, 42)
    step = 5
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    exp_p, exp_m, exp_v = p.copy(), m.copy(), v.copy()
    bc1 = np.float32(1.0 - math.pow(b1, step))
    bc2 = np.float32(1.0 - math.pow(b2, step))
    f = np.float32
    for i in range(16):
        mi = f(f(f(b1) * exp_m[i]) + f(f(1.0 - f(b1)) * g[i]))
        vi = f(f(f(b2) * exp_v[i]) + f(f(1.0 - f(b2)) * f(g[i] * g[i])))
        mh = f(mi / bc1)
        vh = f(vi / bc2)
        upd = f(f(lr) * mh) / f(f(np.sqrt(vh)) + f(eps))
        exp_p[i] = f(exp_p[i] - upd)
        exp_m[i] = mi
        exp_v[i] = vi
    adam_step_arrays(p, m, v, g, lr, b1, b2, eps, step)
    assert p.tobytes() == exp_p.tobytes()
    assert m.tobytes() == exp_m.tobytes()
    assert v.tobytes() == exp_v.tobytes()


def test_repeated_call_is_deterministic():
    p1, m1, v1, g = _rand_state(512, 7)
    p2, m2, v2 = p1.copy(), m1.copy(), v1.copy()
    adam_step_arrays(p1, m1, v1, g, 1e-3, 0.9, 0.999, 1e-8, 1)
    adam_step_arrays(p2, m2, v2, g, 1e-3, 0.9, 0.999, 1e-8, 1)
    assert p1.tobytes() == p2.tobytes()
    assert m1.tobytes() == m2.tobytes()
    assert v1.tobytes() == v2.tobytes()


def test_step_must_be_positive():
    p, m, v, g = _rand_state(4, 0)
    with pytest.raises(ValueError):
        adam_step_arrays(p, m, v, g, 1e-3, 0.9, 0.999, 1e-8, 0)


def test_rejects_wrong_dtype():
    p, m, v, g = _rand_state(4, 0)
    with pytest.raises(TypeError):
        adam_step_arrays(p.astype(np.float64), m, v, g, 1e-3, 0.9, 0.999, 1e-8, 1)
    with pytest.raises(TypeError):
        adam_step_arrays(p, m, v, g.astype(np.float16), 1e-3, 0.9, 0.999, 1e-8, 1)


def test_rejects_shape_mismatch():
    p, m, v, g = _rand_state(4, 0)
    with pytest.raises(ValueError):
        adam_step_arrays(p, m, v, g[:2], 1e-3, 0.9, 0.999, 1e-8, 1)
