"""Shared oracles and helpers for the test suite."""

import numpy as np
import pytest

from robustkit import Tape, Tensor, backward
from robustkit.rng import Rng


def conv2d_loops(x, w, b=None, stride=1, pad=0):
    """Direct nested-loop cross-correlation; the reference for conv2d."""
    n, cin, h, wid = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wid + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for ni in range(n):
        for co in range(cout):
            for hi in range(ho):
                for wi in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for i in range(k):
                            for j in range(k):
                                acc += float(xp[ni, ci, hi * stride + i, wi * stride + j]) \
                                    * float(w[co, ci, i, j])
                    out[ni, co, hi, wi] = acc + (float(b[co]) if b is not None else 0.0)
    return out


def dense_loops(x, w, b=None):
    """Triple-loop affine map; the reference for dense."""
    n, d = x.shape
    _, m = w.shape
    out = np.zeros((n, m), dtype=np.float64)
    for ni in range(n):
        for mi in range(m):
            acc = 0.0
            for di in range(d):
                acc += float(x[ni, di]) * float(w[di, mi])
            out[ni, mi] = acc + (float(b[mi]) if b is not None else 0.0)
    return out


def rel_err(a, b, floor=1e-8):
    a = float(a)
    b = float(b)
    return abs(a - b) / max(abs(a), abs(b), floor)


def central_diff(f, arr, idx, h=1e-3):
    """Central finite difference of scalar-valued f at one array component."""
    up = arr.copy()
    up[idx] += h
    down = arr.copy()
    down[idx] -= h
    return (f(up) - f(down)) / (2.0 * h)


def check_component(f, arr, idx, analytic, h=1e-3, tol=1e-4):
    """Assert one finite-difference probe, refining h across ReLU kinks.

    A secant that straddles a ReLU kink is not a valid derivative estimate at
    the nominal step; when the first probe disagrees, the step is shrunk and
    the refined estimates must converge to the analytic value instead.
    Returns the final relative error.
    """
    last = None
    for step in (h, h / 10.0, h / 100.0):
        num = central_diff(f, arr, idx, h=step)
        if abs(analytic) < 1e-9 and abs(num) < 1e-9:
            return 0.0
        last = rel_err(analytic, num)
        if last <= tol:
            return last
    raise AssertionError(
        f"component {idx}: analytic {analytic:.8e} vs numeric {num:.8e} "
        f"(rel err {last:.2e} after step refinement)")


def gradcheck_op(op, arrs, h=1e-3, tol=1e-6, samples=10, seed=0, dtype=np.float64):
    """Check d(sum of op output)/d(input) against central differences.

    ``op`` maps a tuple of Tensors to one Tensor.  Every input is probed at
    ``samples`` random components (all components when the array is small).
    """
    from robustkit.tensor import tensor_sum

    rng = Rng(seed).derive("gradcheck")
    arrs = [np.asarray(a, dtype=dtype) for a in arrs]

    def run(values):
        tensors = [Tensor(v, requires_grad=True, name=f"arg{i}", dtype=dtype)
                   for i, v in enumerate(values)]
        with Tape() as tape:
            out = tensor_sum(op(*tensors))
        return out.item(), backward(tape, out)

    _, grads = run(arrs)
    for i, arr in enumerate(arrs):
        flat_n = arr.size
        if flat_n <= samples:
            picks = range(flat_n)
        else:
            picks = sorted({int(rng.uniform(()) * flat_n) for _ in range(samples)})
        analytic = grads[f"arg{i}"].data
        for flat in picks:
            idx = np.unravel_index(flat, arr.shape)

            def f(a, i=i, idx=idx):
                vals = [x.copy() for x in arrs]
                vals[i] = a
                return run(vals)[0]

            num = central_diff(f, arr, idx, h=h)
            if abs(analytic[idx]) < 1e-9 and abs(num) < 1e-9:
                continue  # both vanish; relative error is meaningless
            err = rel_err(analytic[idx], num)
            assert err <= tol, (
                f"input {i} component {idx}: analytic {analytic[idx]:.8e} vs "
                f"numeric {num:.8e} (rel err {err:.2e})")


@pytest.fixture
def rng():
    return Rng(20240)
