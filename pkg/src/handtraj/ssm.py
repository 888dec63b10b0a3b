"""Selective state-space computation.

Covers ZOH discretization, the sequential/chunked selective scans over
concatenated token+motion channels, the frozen-parameter LTI convolution
kernel (valid only when projections are input-independent), and the trainable
motion-aware block built on the autodiff core.

Conventions: sequences are (T, C) or batched (B, T, C); scan state is
(B, C, N) with N = d_state. The hidden state starts at zeros at the first
timestep of a sequence unless an explicit state is given.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor


@dataclass
class SsmDims:
    d_model: int
    d_state: int = 16
    d_motion: int = 16
    d_conv: int = 2
    expand: int = 1

    def __post_init__(self):
        for name in ("d_model", "d_state", "d_motion", "d_conv", "expand"):
            if getattr(self, name) < 1:
                raise ValueError(f"SsmDims.{name} must be positive")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model


@dataclass
class SelectiveParams:
    """Input-dependent projections for one scan: y = C_t h_t,
    h_t = exp(Delta_t A) h_{t-1} + Bbar_t u_t.

    a: (C, N) strictly negative diagonal evolution values.
    w_delta: (C, C), b_delta: (C,)  -> Delta = softplus(u @ w_delta + b_delta)
    w_b, w_c: (C, N)                -> B_t = u @ w_b, C_t = u @ w_c
    """

    a: np.ndarray
    w_delta: np.ndarray
    b_delta: np.ndarray
    w_b: np.ndarray
    w_c: np.ndarray

    def __post_init__(self):
        if np.any(self.a >= 0):
            raise ValueError("SelectiveParams.a must be strictly negative")


@dataclass
class ScanState:
    h: np.ndarray  # (B, C, N) or (C, N)
    t: int = 0


def random_selective_params(rng: np.random.Generator, channels: int, d_state: int) -> SelectiveParams:
    """Convenience constructor used by tests and benchmarks."""
    a = -np.cumsum(rng.uniform(0.2, 1.0, size=(channels, d_state)), axis=1)
    k = 1.0 / np.sqrt(channels)
    return SelectiveParams(
        a=a,
        w_delta=rng.uniform(-k, k, size=(channels, channels)),
        b_delta=np.log(np.expm1(rng.uniform(1e-3, 1e-1, size=channels))),
        w_b=rng.uniform(-k, k, size=(channels, d_state)),
        w_c=rng.uniform(-k, k, size=(channels, d_state)),
    )


# ---------------------------------------------------------------------------
# numpy-level scan API


def discretize_zoh(a: np.ndarray, b: np.ndarray, delta: np.ndarray):
    """Zero-order-hold discretization of a diagonal continuous-time SSM.

    abar = exp(delta * a); bbar = ((exp(delta * a) - 1) / a) * b, elementwise
    with broadcasting. Raises if any entry of a is exactly zero (the closed
    form divides by a).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(a == 0.0):
        raise ValueError("discretize_zoh: A has a zero diagonal entry")
    x = delta * a
    abar = np.exp(x)
    bbar = (np.expm1(x) / a) * b
    return abar, bbar


def _softplus(x):
    return np.logaddexp(0.0, x)


def _project(u: np.ndarray, params: SelectiveParams):
    """u: (B, T, C) -> per-step (abar, bu, cseq) arrays for the scan."""
    delta = _softplus(u @ params.w_delta + params.b_delta)  # (B,T,C)
    bsel = u @ params.w_b  # (B,T,N)
    cseq = u @ params.w_c  # (B,T,N)
    x = delta[..., None] * params.a  # (B,T,C,N)
    abar = np.exp(x)
    bbar = (np.expm1(x) / params.a) * bsel[..., None, :]
    bu = bbar * u[..., None]
    return abar, bu, cseq


def scan_apply(abar, bu, cseq, h0=None, chunk_size=None, backend=None) -> np.ndarray:
    """Run the recurrence on already-discretized arrays and read out
    y[t, c] = sum_n cseq[t, n] * h[t, c, n]."""
    h = kernels.scan_forward(abar, bu, h0, chunk_size=chunk_size, backend=backend)
    return np.einsum("btn,btcn->btc", cseq, h)


def _with_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"expected (T, C) or (B, T, C) sequence, got shape {x.shape}")


def _concat_inputs(x, m):
    x, squeeze = _with_batch(x)
    if m is None:
        u = x
    else:
        m, _ = _with_batch(m)
        if m.shape[:2] != x.shape[:2]:
            raise ValueError(
                f"token/motion length mismatch: x has {x.shape[:2]}, m has {m.shape[:2]}"
            )
        u = np.concatenate([x, m], axis=-1)
    return u, squeeze


def selective_scan_sequential(x, m, params: SelectiveParams, h0: ScanState | None = None):
    """Selective scan over the concatenated [x_t, m_t] channels, left to right.

    x: (T, d_x) or (B, T, d_x) token channels; m: motion channels of matching
    length or None. Returns y with the same leading shape and C = d_x + d_m
    channels.
    """
    u, squeeze = _concat_inputs(x, m)
    abar, bu, cseq = _project(u, params)
    y = scan_apply(abar, bu, cseq, h0=_state_array(h0))
    return y[0] if squeeze else y


def selective_scan_chunked(x, m, params: SelectiveParams, h0: ScanState | None = None,
                           chunk_size: int = 8):
    """Chunk-composed variant; result matches selective_scan_sequential."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    u, squeeze = _concat_inputs(x, m)
    abar, bu, cseq = _project(u, params)
    y = scan_apply(abar, bu, cseq, h0=_state_array(h0), chunk_size=chunk_size)
    return y[0] if squeeze else y


def _state_array(h0: ScanState | None):
    if h0 is None:
        return None
    return h0.h if h0.h.ndim == 3 else h0.h[None]


def lti_convolution_kernel(abar: np.ndarray, bbar: np.ndarray, c: np.ndarray,
                           length: int) -> np.ndarray:
    """Kernel K[j, ch] = sum_n c[n] * abar[ch, n]**j * bbar[ch, n] for frozen
    (input-independent) parameters. Only then does convolution with K equal
    the scan."""
    if length < 1:
        raise ValueError("kernel length must be >= 1")
    abar = np.atleast_2d(np.asarray(abar, dtype=np.float64))
    bbar = np.atleast_2d(np.asarray(bbar, dtype=np.float64))
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 1:
        c = np.broadcast_to(c, abar.shape)
    powers = abar[None] ** np.arange(length)[:, None, None]  # (L, C, N)
    return np.einsum("lcn,cn->lc", powers * bbar[None], c)


def causal_convolve(u: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """y[t, c] = sum_{j<=t} kernel[j, c] * u[t-j, c] (per-channel causal conv)."""
    T, C = u.shape
    L = kernel.shape[0]
    y = np.zeros_like(u)
    for j in range(min(L, T)):
        y[j:] += kernel[j] * u[: T - j]
    return y


# ---------------------------------------------------------------------------
# differentiable scan primitive


def scan_op(abar: Tensor, bu: Tensor, cseq: Tensor, chunk_size=None) -> Tensor:
    """Differentiable y = scan(abar, bu, cseq) with a hand-derived reverse pass.

    Forward stores h. Reverse: with gy the output cotangent,
      term[t,c,n] = cseq[t,n] * gy[t,c]
      gh[t] = term[t] + abar[t+1] * gh[t+1]      (reverse-time scan)
      d_abar[t] = gh[t] * h[t-1],  d_bu = gh,
      d_cseq[t,n] = sum_c gy[t,c] * h[t,c,n].
    """
    abar = ad.astensor(abar)
    bu = ad.astensor(bu)
    cseq = ad.astensor(cseq)
    h = kernels.scan_forward(abar.data, bu.data, chunk_size=chunk_size)
    y = np.einsum("btn,btcn->btc", cseq.data, h)
    cache: dict = {}

    def _gh(gy):
        if "gh" not in cache:
            term = cseq.data[:, :, None, :] * gy[..., None]
            cache["gh"] = kernels.scan_backward(abar.data, term)
        return cache["gh"]

    def vjp_abar(gy):
        hprev = np.concatenate([np.zeros_like(h[:, :1]), h[:, :-1]], axis=1)
        return _gh(gy) * hprev

    def vjp_bu(gy):
        return _gh(gy)

    def vjp_cseq(gy):
        return np.einsum("btc,btcn->btn", gy, h)

    return ad.apply_custom(y, (abar, bu, cseq), (vjp_abar, vjp_bu, vjp_cseq))


def causal_depthwise_conv(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Depthwise causal convolution over time. x: (B,T,C), w: (k,C), b: (C,)."""
    B, T, C = x.shape
    k = w.shape[0]
    pad = Tensor(np.zeros((B, k - 1, C), dtype=x.data.dtype))
    xp = ad.concat([pad, x], axis=1) if k > 1 else x
    out = None
    for j in range(k):
        term = ad.mul(xp[:, j:j + T, :], w[j])
        out = term if out is None else ad.add(out, term)
    return ad.add(out, b)


class MotionAwareMambaBlock:
    """One residual block: in-projection, causal depthwise conv, SiLU, the
    selective scan over [token, motion] channels, SiLU gate, out-projection.

    motion_mode:
      'concat' — motion channels are appended to the scan input and re-anchored
                 to the raw motion features after the block (the working
                 sequence is d_model + d_motion wide);
      'sum'    — motion is linearly mapped and added to the token activation;
      'none'   — motion ignored (working width d_model).
    scan_mode: 'forward' or 'bidirectional' (second parameter set on the
    time-reversed activation, outputs summed).
    """

    def __init__(self, dims: SsmDims, motion_mode: str = "concat",
                 scan_mode: str = "forward", rng: np.random.Generator | None = None,
                 dtype=np.float64):
        if motion_mode not in ("concat", "sum", "none"):
            raise ValueError(f"unknown motion_mode {motion_mode!r}")
        if scan_mode not in ("forward", "bidirectional"):
            raise ValueError(f"unknown scan_mode {scan_mode!r}")
        rng = rng or np.random.default_rng(0)
        self.dims = dims
        self.motion_mode = motion_mode
        self.scan_mode = scan_mode
        d = dims.d_model
        dm = dims.d_motion
        self.d_full = d + dm if motion_mode == "concat" else d
        self.d_scan = dims.d_inner + (dm if motion_mode == "concat" else 0)
        ds, N = self.d_scan, dims.d_state

        def lin(fi, fo):
            return ad.param(ad.init_linear(rng, fi, fo), dtype=dtype)

        def zeros(*shape):
            return ad.param(np.zeros(shape), dtype=dtype)

        self.w_in = lin(self.d_full, dims.d_inner)
        self.b_in = zeros(dims.d_inner)
        self.w_gate = lin(self.d_full, ds)
        self.b_gate = zeros(ds)
        kconv = 1.0 / np.sqrt(dims.d_conv)
        self.conv_w = ad.param(rng.uniform(-kconv, kconv, size=(dims.d_conv, ds)), dtype=dtype)
        self.conv_b = zeros(ds)
        self.w_out = zeros(ds, self.d_full)  # zero init => residual passthrough
        self.b_out = zeros(self.d_full)
        if motion_mode == "sum":
            self.w_msum = lin(dm, dims.d_inner)
        self._init_scan_params(rng, ds, N, dtype, suffix="")
        if scan_mode == "bidirectional":
            self._init_scan_params(rng, ds, N, dtype, suffix="_rev")

    def _init_scan_params(self, rng, ds, N, dtype, suffix):
        a_init = np.broadcast_to(np.arange(1, N + 1, dtype=np.float64), (ds, N))
        setattr(self, "a_raw" + suffix, ad.param(np.log(np.expm1(a_init)), dtype=dtype))
        setattr(self, "w_delta" + suffix, ad.param(ad.init_linear(rng, ds, ds), dtype=dtype))
        setattr(self, "b_delta" + suffix,
                ad.param(np.log(np.expm1(rng.uniform(1e-3, 1e-1, size=ds))), dtype=dtype))
        setattr(self, "w_b" + suffix, ad.param(ad.init_linear(rng, ds, N), dtype=dtype))
        setattr(self, "w_c" + suffix, ad.param(ad.init_linear(rng, ds, N), dtype=dtype))

    def named_params(self, prefix: str = "") -> dict:
        names = ["w_in", "b_in", "w_gate", "b_gate", "conv_w", "conv_b", "w_out", "b_out"]
        if self.motion_mode == "sum":
            names.append("w_msum")
        names += ["a_raw", "w_delta", "b_delta", "w_b", "w_c"]
        if self.scan_mode == "bidirectional":
            names += ["a_raw_rev", "w_delta_rev", "b_delta_rev", "w_b_rev", "w_c_rev"]
        return {prefix + n: getattr(self, n) for n in names}

    def _selective(self, s: Tensor, suffix: str, chunk_size=None) -> Tensor:
        B, T, C = s.shape
        a = ad.neg(ad.softplus(getattr(self, "a_raw" + suffix)))
        delta = ad.softplus(ad.linear(s, getattr(self, "w_delta" + suffix),
                                      getattr(self, "b_delta" + suffix)))
        bsel = ad.matmul(s, getattr(self, "w_b" + suffix))
        cseq = ad.matmul(s, getattr(self, "w_c" + suffix))
        x = ad.mul(ad.reshape(delta, (B, T, C, 1)), a)
        abar = ad.exp(x)
        bbar = ad.mul(ad.div(ad.expm1(x), a), ad.reshape(bsel, (B, T, 1, bsel.shape[-1])))
        bu = ad.mul(bbar, ad.reshape(s, (B, T, C, 1)))
        return scan_op(abar, bu, cseq, chunk_size=chunk_size)

    def forward(self, u: Tensor, m, chunk_size=None) -> Tensor:
        u = ad.astensor(u)
        if u.shape[-1] != self.d_full:
            raise ValueError(
                f"block expects width {self.d_full}, got {u.shape[-1]}"
            )
        d = self.dims.d_model
        z = ad.linear(u, self.w_in, self.b_in)
        if self.motion_mode == "concat":
            m = ad.astensor(m)
            if m.shape[1] != u.shape[1]:
                raise ValueError(
                    f"token/motion length mismatch: {u.shape[1]} vs {m.shape[1]}"
                )
            spre = ad.concat([z, m], axis=-1)
        elif self.motion_mode == "sum":
            m = ad.astensor(m)
            spre = ad.add(z, ad.matmul(m, self.w_msum))
        else:
            spre = z
        s = ad.silu(causal_depthwise_conv(spre, self.conv_w, self.conv_b))
        y = self._selective(s, "", chunk_size=chunk_size)
        if self.scan_mode == "bidirectional":
            rev = (slice(None), slice(None, None, -1))
            y_rev = self._selective(s[rev], "_rev", chunk_size=chunk_size)
            y = ad.add(y, y_rev[rev])
        gate = ad.silu(ad.linear(u, self.w_gate, self.b_gate))
        out = ad.add(u, ad.linear(ad.mul(y, gate), self.w_out, self.b_out))
        if self.motion_mode == "concat":
            out = ad.concat([out[..., :d], m], axis=-1)  # re-anchor motion span
        return out


def mamba_block_forward(block: MotionAwareMambaBlock, latents, motion) -> np.ndarray:
    """Array-in/array-out block application (no tape)."""
    lat, squeeze = _with_batch(np.asarray(latents, dtype=np.float64))
    mot = None
    if block.motion_mode != "none":
        mot, _ = _with_batch(np.asarray(motion, dtype=np.float64))
    out = block.forward(Tensor(lat), None if mot is None else Tensor(mot)).data
    return out[0] if squeeze else out
