"""Optional numba acceleration for the LSTM gate arithmetic.

The backward gate math is pure arithmetic over small matrices, which is
latency-bound in numpy (one ufunc dispatch per operation). When numba is
importable the fused kernel below replaces ~14 ufunc passes with one loop;
otherwise the numpy fallback in autodiff is used. Both paths are compared
to 1e-12 in the test suite.
"""

from __future__ import annotations

import numpy as np

try:
    import numba

    @numba.njit(cache=True, fastmath=False)
    def gate_backward(gates, c_prev, tanh_c, gh, gc):  # pragma: no cover - exercised via autodiff
        B, G = gates.shape
        H = G // 4
        gpre = np.empty_like(gates)
        gc_prev = np.empty((B, H))
        for bi in range(B):
            for k in range(H):
                i = gates[bi, k]
                f = gates[bi, H + k]
                o = gates[bi, 2 * H + k]
                g = gates[bi, 3 * H + k]
                tc = tanh_c[bi, k]
                gct = gc[bi, k] + gh[bi, k] * o * (1.0 - tc * tc)
                gpre[bi, k] = gct * g * i * (1.0 - i)
                gpre[bi, H + k] = gct * c_prev[bi, k] * f * (1.0 - f)
                gpre[bi, 2 * H + k] = gh[bi, k] * tc * o * (1.0 - o)
                gpre[bi, 3 * H + k] = gct * i * (1.0 - g * g)
                gc_prev[bi, k] = gct * f
        return gpre, gc_prev

    HAVE_NUMBA = True
except Exception:  # pragma: no cover
    gate_backward = None
    HAVE_NUMBA = False


def single_thread_blas():
    """Context manager pinning BLAS pools to one thread; no-op if unavailable.

    The training matrices are small enough that OpenBLAS threading costs more
    than it saves.
    """
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    except Exception:  # pragma: no cover
        import contextlib

        return contextlib.nullcontext()
