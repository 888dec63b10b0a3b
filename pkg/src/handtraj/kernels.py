"""Hot inner loops of the selective scan.

Each kernel exists twice: a numba ``@njit`` version and a vectorized pure-numpy
version. The numpy path is selected when numba is unavailable or when the
environment variable ``HANDTRAJ_NO_NUMBA`` is set (read per call, so tests and
benchmarks can flip it). ``HANDTRAJ_THREADS`` caps numba's thread pool.

Array layout everywhere: (B, T, C, N) — batch, time, channel, state.
The recurrence is h[t] = abar[t] * h[t-1] + bu[t], elementwise over (C, N).
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via HANDTRAJ_NO_NUMBA instead
    HAS_NUMBA = False

if HAS_NUMBA and os.environ.get("HANDTRAJ_THREADS"):
    try:
        numba.set_num_threads(max(1, int(os.environ["HANDTRAJ_THREADS"])))
    except (ValueError, RuntimeError):
        pass


def default_backend() -> str:
    if HAS_NUMBA and not os.environ.get("HANDTRAJ_NO_NUMBA"):
        return "numba"
    return "numpy"


# ---------------------------------------------------------------------------
# numpy kernels


def scan_fwd_numpy(abar: np.ndarray, bu: np.ndarray, h0: np.ndarray) -> np.ndarray:
    B, T, C, N = abar.shape
    h = np.empty_like(bu)
    prev = h0
    for t in range(T):
        prev = abar[:, t] * prev + bu[:, t]
        h[:, t] = prev
    return h


def scan_bwd_numpy(abar: np.ndarray, term: np.ndarray) -> np.ndarray:
    """Reverse recurrence gh[t] = term[t] + abar[t+1] * gh[t+1]."""
    B, T, C, N = term.shape
    gh = np.empty_like(term)
    gh[:, T - 1] = term[:, T - 1]
    for t in range(T - 2, -1, -1):
        gh[:, t] = term[:, t] + abar[:, t + 1] * gh[:, t + 1]
    return gh


def scan_chunked_fwd_numpy(abar: np.ndarray, bu: np.ndarray, h0: np.ndarray,
                           chunk: int) -> np.ndarray:
    """Same recurrence evaluated chunk-parallel.

    Within-chunk states are computed with a zero initial state (vectorized
    across all chunks at once); chunk transfer pairs (prod of abar, folded bu)
    are then composed left-to-right and the carried state is broadcast back in:
    h[t] = P[t] * carry(chunk) + h_local[t].
    """
    B, T, C, N = abar.shape
    L = int(chunk)
    G = (T + L - 1) // L
    pad = G * L - T
    if pad:
        abar = np.concatenate([abar, np.ones((B, pad, C, N), abar.dtype)], axis=1)
        bu = np.concatenate([bu, np.zeros((B, pad, C, N), bu.dtype)], axis=1)
    ap = abar.reshape(B, G, L, C, N)
    bp = bu.reshape(B, G, L, C, N)
    P = np.cumprod(ap, axis=2)
    hloc = np.empty_like(bp)
    run = bp[:, :, 0].copy()
    hloc[:, :, 0] = run
    for l in range(1, L):
        run = ap[:, :, l] * run + bp[:, :, l]
        hloc[:, :, l] = run
    carry = np.empty((B, G, C, N), dtype=bp.dtype)
    c = h0.astype(bp.dtype, copy=True)
    for g in range(G):
        carry[:, g] = c
        c = P[:, g, -1] * c + hloc[:, g, -1]
    h = hloc + P * carry[:, :, None]
    return h.reshape(B, G * L, C, N)[:, :T]


# ---------------------------------------------------------------------------
# numba kernels

if HAS_NUMBA:

    @njit(cache=True, fastmath=False)
    def scan_fwd_numba(abar, bu, h0):  # pragma: no cover - jit
        B, T, C, N = abar.shape
        h = np.empty_like(bu)
        for b in range(B):
            for c in range(C):
                for n in range(N):
                    prev = h0[b, c, n]
                    for t in range(T):
                        prev = abar[b, t, c, n] * prev + bu[b, t, c, n]
                        h[b, t, c, n] = prev
        return h

    @njit(cache=True, fastmath=False)
    def scan_bwd_numba(abar, term):  # pragma: no cover - jit
        B, T, C, N = term.shape
        gh = np.empty_like(term)
        for b in range(B):
            for c in range(C):
                for n in range(N):
                    nxt = term[b, T - 1, c, n]
                    gh[b, T - 1, c, n] = nxt
                    for t in range(T - 2, -1, -1):
                        nxt = term[b, t, c, n] + abar[b, t + 1, c, n] * nxt
                        gh[b, t, c, n] = nxt
        return gh

    @njit(cache=True, fastmath=False)
    def scan_chunked_fwd_numba(abar, bu, h0, chunk):  # pragma: no cover - jit
        B, T, C, N = abar.shape
        h = np.empty_like(bu)
        for b in range(B):
            for c in range(C):
                for n in range(N):
                    carry = h0[b, c, n]
                    g0 = 0
                    while g0 < T:
                        g1 = min(g0 + chunk, T)
                        p = 1.0
                        loc = 0.0
                        for t in range(g0, g1):
                            a = abar[b, t, c, n]
                            loc = a * loc + bu[b, t, c, n]
                            p = p * a
                            h[b, t, c, n] = loc + p * carry
                        carry = loc + p * carry
                        g0 = g1
        return h


# ---------------------------------------------------------------------------
# dispatch


def _resolve(backend: str | None) -> str:
    if backend is None:
        return default_backend()
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}, expected 'numba' or 'numpy'")
    if backend == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    return backend


def _prep(abar, bu, h0):
    abar = np.ascontiguousarray(abar)
    bu = np.ascontiguousarray(bu)
    B, T, C, N = abar.shape
    if h0 is None:
        h0 = np.zeros((B, C, N), dtype=bu.dtype)
    else:
        h0 = np.ascontiguousarray(h0, dtype=bu.dtype)
    return abar, bu, h0


def scan_forward(abar, bu, h0=None, chunk_size: int | None = None,
                 backend: str | None = None) -> np.ndarray:
    """Run the scan recurrence; returns all hidden states h, shape (B,T,C,N)."""
    abar, bu, h0 = _prep(abar, bu, h0)
    use = _resolve(backend)
    if chunk_size is None:
        if use == "numba":
            return scan_fwd_numba(abar, bu, h0)
        return scan_fwd_numpy(abar, bu, h0)
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if use == "numba":
        return scan_chunked_fwd_numba(abar, bu, h0, int(chunk_size))
    return scan_chunked_fwd_numpy(abar, bu, h0, int(chunk_size))


def scan_backward(abar, term, backend: str | None = None) -> np.ndarray:
    """Reverse-mode companion of scan_forward (cotangent recurrence)."""
    abar = np.ascontiguousarray(abar)
    term = np.ascontiguousarray(term)
    if _resolve(backend) == "numba":
        return scan_bwd_numba(abar, term)
    return scan_bwd_numpy(abar, term)
