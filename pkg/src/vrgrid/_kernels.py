"""Hot numeric kernels.

Everything in this module is compiled with numba's ``njit`` when numba is
importable. Setting the environment variable ``VRGRID_DISABLE_NUMBA=1``
before import (or running without numba installed) selects the pure
Python/NumPy fallback path instead; the fallback computes the same values,
only slower. ``benchmarks/bench_kernels.py`` compares the two paths.
"""

import math
import os

import numpy as np


def _truthy(value):
    return value.strip().lower() not in ("", "0", "false", "no")


NUMBA_DISABLED = _truthy(os.environ.get("VRGRID_DISABLE_NUMBA", ""))

try:
    if NUMBA_DISABLED:
        raise ImportError("numba disabled by VRGRID_DISABLE_NUMBA")
    from numba import njit

    NUMBA_ENABLED = True
except ImportError:
    NUMBA_ENABLED = False

    def njit(*args, **kwargs):  # noqa: ARG001 - mirrors numba's signature
        if args and callable(args[0]):
            return args[0]

        def decorate(func):
            return func

        return decorate


def python_impl(func):
    """Uncompiled implementation of a kernel (for benchmarks and tests)."""
    return getattr(func, "py_func", func)


# Element kind codes, shared with vrgrid.bank.
LINEAR = 0
CUBIC = 1
SINH = 2
TANH = 3
SATURATION = 4

_LN2 = 0.6931471805599453


@njit(cache=True)
def element_value(code, p1, p2, x):
    if code == LINEAR:
        return p1 * x
    if code == CUBIC:
        return p1 * x * x * x
    if code == SINH:
        return p1 * math.sinh(p2 * x)
    if code == TANH:
        return p1 * math.tanh(p2 * x)
    # saturation: gain p1, hard-clipped at |x| = p2
    if x > p2:
        return p1 * p2
    if x < -p2:
        return -p1 * p2
    return p1 * x


@njit(cache=True)
def _ln_cosh(y):
    # overflow-safe log(cosh(y))
    a = abs(y)
    return a + math.log1p(math.exp(-2.0 * a)) - _LN2


@njit(cache=True)
def element_primitive(code, p1, p2, x):
    if code == LINEAR:
        return 0.5 * p1 * x * x
    if code == CUBIC:
        return 0.25 * p1 * x * x * x * x
    if code == SINH:
        return (p1 / p2) * (math.cosh(p2 * x) - 1.0)
    if code == TANH:
        return (p1 / p2) * _ln_cosh(p2 * x)
    a = abs(x)
    if a <= p2:
        return 0.5 * p1 * x * x
    return p1 * p2 * a - 0.5 * p1 * p2 * p2


@njit(cache=True)
def series_sum(codes, p1s, p2s, x):
    total = 0.0
    for i in range(codes.shape[0]):
        total += element_value(codes[i], p1s[i], p2s[i], x)
    return total


@njit(cache=True)
def rk4_loop(y0d, y0q, dt, n_steps, lg, wg, rg_seq, dist_d, dist_q,
             codes_d, p1_d, p2_d, codes_q, p1_q, p2_q):
    """Fixed-step classical RK4 on the closed-loop current-error dynamics.

    The grid resistance and the disturbance are held constant within each
    step (sampled at the step start). Returns ``(trajectory, abort_index)``
    where ``abort_index`` is -1 when every sample stayed finite, otherwise
    the index of the first non-finite sample.
    """
    out = np.empty((n_steps + 1, 2))
    out[0, 0] = y0d
    out[0, 1] = y0q
    inv_lg = 1.0 / lg
    for n in range(n_steps):
        a = -rg_seq[n] * inv_lg
        vd = dist_d[n]
        vq = dist_q[n]
        yd = out[n, 0]
        yq = out[n, 1]

        k1d = a * yd + wg * yq - inv_lg * (series_sum(codes_d, p1_d, p2_d, yd) + vd)
        k1q = -wg * yd + a * yq - inv_lg * (series_sum(codes_q, p1_q, p2_q, yq) + vq)

        td = yd + 0.5 * dt * k1d
        tq = yq + 0.5 * dt * k1q
        k2d = a * td + wg * tq - inv_lg * (series_sum(codes_d, p1_d, p2_d, td) + vd)
        k2q = -wg * td + a * tq - inv_lg * (series_sum(codes_q, p1_q, p2_q, tq) + vq)

        td = yd + 0.5 * dt * k2d
        tq = yq + 0.5 * dt * k2q
        k3d = a * td + wg * tq - inv_lg * (series_sum(codes_d, p1_d, p2_d, td) + vd)
        k3q = -wg * td + a * tq - inv_lg * (series_sum(codes_q, p1_q, p2_q, tq) + vq)

        td = yd + dt * k3d
        tq = yq + dt * k3q
        k4d = a * td + wg * tq - inv_lg * (series_sum(codes_d, p1_d, p2_d, td) + vd)
        k4q = -wg * td + a * tq - inv_lg * (series_sum(codes_q, p1_q, p2_q, tq) + vq)

        yd = yd + dt / 6.0 * (k1d + 2.0 * k2d + 2.0 * k3d + k4d)
        yq = yq + dt / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
        out[n + 1, 0] = yd
        out[n + 1, 1] = yq
        if not (math.isfinite(yd) and math.isfinite(yq)):
            return out, n + 1
    return out, -1


@njit(cache=True)
def jacobi_sweep(a, v, rel_tol):
    """Cyclic Jacobi rotations on symmetric ``a`` (modified in place).

    Rotations are accumulated into ``v`` (preset to identity by the caller),
    so that a_input = v @ diag(a) @ v.T on return. Sweeps stop once the
    off-diagonal Frobenius norm drops below ``rel_tol`` times the Frobenius
    norm of the input. Returns the number of sweeps used.
    """
    n = a.shape[0]
    fro = 0.0
    for i in range(n):
        for j in range(n):
            fro += a[i, j] * a[i, j]
    thresh = rel_tol * math.sqrt(fro)

    sweeps = 0
    while sweeps < 64:
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                off += 2.0 * a[i, j] * a[i, j]
        if math.sqrt(off) <= thresh:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + math.sqrt(1.0 + theta * theta))
                else:
                    t = -1.0 / (-theta + math.sqrt(1.0 + theta * theta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                tau = s / (1.0 + c)

                a[p, p] -= t * apq
                a[q, q] += t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for i in range(n):
                    if i == p or i == q:
                        continue
                    aip = a[i, p]
                    aiq = a[i, q]
                    a[i, p] = aip - s * (aiq + tau * aip)
                    a[p, i] = a[i, p]
                    a[i, q] = aiq + s * (aip - tau * aiq)
                    a[q, i] = a[i, q]
                for i in range(n):
                    vip = v[i, p]
                    viq = v[i, q]
                    v[i, p] = vip - s * (viq + tau * vip)
                    v[i, q] = viq + s * (vip - tau * viq)
        sweeps += 1
    return sweeps
