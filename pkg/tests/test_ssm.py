"""Selective-scan tests: ZOH discretization against a matrix-exponential
oracle, hand-unrolled recurrences, chunked/sequential equivalence, the frozen
LTI convolution identity, causality, and gradients through the scan.
"""

import numpy as np
import numpy.testing as npt
import pytest
import scipy.linalg

from handtraj import autodiff as ad
from handtraj import kernels, ssm
from handtraj.autodiff import Tape, Tensor
from handtraj.ssm import (
    MotionAwareMambaBlock,
    ScanState,
    SelectiveParams,
    SsmDims,
    causal_convolve,
    discretize_zoh,
    lti_convolution_kernel,
    mamba_block_forward,
    random_selective_params,
    scan_apply,
    scan_op,
    selective_scan_chunked,
    selective_scan_sequential,
)

from gradcheck import assert_gradients_close


def make_scan_arrays(rng, b=1, t=6, c=3, n=2):
    """Random, stable discretized scan inputs (abar strictly inside (0,1))."""
    abar = rng.uniform(0.05, 0.95, size=(b, t, c, n))
    bu = rng.standard_normal((b, t, c, n))
    cseq = rng.standard_normal((b, t, n))
    return abar, bu, cseq


# ---------------------------------------------------------------------------
# ZOH discretization


def test_zoh_frozen_scalar():
    abar, bbar = discretize_zoh(np.array([-1.0]), np.array([1.0]), np.array([np.log(2.0)]))
    npt.assert_allclose(abar, 0.5, rtol=1e-15)
    npt.assert_allclose(bbar, 0.5, rtol=1e-15)


def test_zoh_matches_matrix_exponential_oracle():
    rng = np.random.default_rng(42)
    a = -rng.uniform(0.1, 4.0, size=12)
    b = rng.standard_normal(12)
    delta = rng.uniform(1e-3, 2.0, size=12)
    abar, bbar = discretize_zoh(a, b, delta)
    worst = 0.0
    for i in range(12):
        m = scipy.linalg.expm(np.array([[delta[i] * a[i]]]))
        abar_ref = m[0, 0]
        bbar_ref = (abar_ref - 1.0) / a[i] * b[i]
        worst = max(worst, abs(abar[i] - abar_ref), abs(bbar[i] - bbar_ref))
    assert worst < 1e-12


def test_zoh_euler_limit_bound():
    # B_bar = delta*b*(1 + delta*a/2 + ...) so |B_bar - delta*b| is bounded by
    # |a||b| e^{|delta a|} delta^2 / 2.
    a, b = -1.7, 0.9
    for delta in (1e-1, 1e-2, 1e-3, 1e-4):
        abar, bbar = discretize_zoh(np.array([a]), np.array([b]), np.array([delta]))
        bound = abs(a) * abs(b) * np.exp(abs(delta * a)) * delta**2 / 2.0
        assert abs(bbar[0] - delta * b) <= bound
        assert abs(abar[0] - 1.0) <= abs(a) * delta  # first-order A limit


def test_zoh_rejects_zero_a():
    with pytest.raises(ValueError):
        discretize_zoh(np.array([0.0]), np.array([1.0]), np.array([0.5]))


# ---------------------------------------------------------------------------
# scan recurrence


def test_frozen_scalar_recurrence():
    # abar=0.5, bu=1, c=1: h = [1, 1.5, 1.75]
    abar = np.full((1, 3, 1, 1), 0.5)
    bu = np.ones((1, 3, 1, 1))
    cseq = np.ones((1, 3, 1))
    y = scan_apply(abar, bu, cseq)
    npt.assert_allclose(y[0, :, 0], [1.0, 1.5, 1.75], rtol=1e-15)


def test_scan_h0_continuation():
    rng = np.random.default_rng(3)
    abar, bu, cseq = make_scan_arrays(rng, t=10)
    h = kernels.scan_forward(abar, bu)
    y_full = np.einsum("btn,btcn->btc", cseq, h)
    split = 4
    y_tail = scan_apply(abar[:, split:], bu[:, split:], cseq[:, split:], h0=h[:, split - 1])
    npt.assert_allclose(y_tail, y_full[:, split:], atol=1e-14)


def test_chunked_equals_sequential_across_lengths():
    rng = np.random.default_rng(0)
    worst = 0.0
    for length in (1, 2, 14, 64):
        for _ in range(5):
            params = random_selective_params(rng, channels=5, d_state=3)
            x = rng.standard_normal((length, 3))
            m = rng.standard_normal((length, 2))
            y_seq = selective_scan_sequential(x, m, params)
            for chunk in (1, 3, 8, length):
                y_chk = selective_scan_chunked(x, m, params, chunk_size=chunk)
                worst = max(worst, float(np.abs(y_seq - y_chk).max()))
    assert worst < 1e-10


def test_chunk_size_validation():
    rng = np.random.default_rng(1)
    params = random_selective_params(rng, channels=2, d_state=2)
    with pytest.raises(ValueError):
        selective_scan_chunked(np.zeros((4, 1)), np.zeros((4, 1)), params, chunk_size=0)


def test_zero_motion_equals_vanilla_on_padded_input():
    # MDSS with m == 0 must equal the plain selective scan run on the
    # zero-padded input [x, 0] — same code path, exactly equal.
    rng = np.random.default_rng(9)
    params = random_selective_params(rng, channels=6, d_state=4)
    x = rng.standard_normal((12, 4))
    zeros = np.zeros((12, 2))
    y_mdss = selective_scan_sequential(x, zeros, params)
    y_vanilla = selective_scan_sequential(np.concatenate([x, zeros], axis=-1), None, params)
    npt.assert_array_equal(y_mdss, y_vanilla)


def test_zero_input_gives_zero_output():
    rng = np.random.default_rng(2)
    params = random_selective_params(rng, channels=4, d_state=3)
    y = selective_scan_sequential(np.zeros((7, 2)), np.zeros((7, 2)), params)
    npt.assert_array_equal(y, np.zeros_like(y))


def test_length_mismatch_raises():
    rng = np.random.default_rng(4)
    params = random_selective_params(rng, channels=4, d_state=2)
    with pytest.raises(ValueError):
        selective_scan_sequential(np.zeros((5, 2)), np.zeros((4, 2)), params)


def test_scan_causality_probe():
    rng = np.random.default_rng(5)
    params = random_selective_params(rng, channels=4, d_state=3)
    x = rng.standard_normal((10, 2))
    m = rng.standard_normal((10, 2))
    y = selective_scan_sequential(x, m, params)
    k = 6
    x2 = x.copy()
    x2[k:] += rng.standard_normal((10 - k, 2))
    y2 = selective_scan_sequential(x2, m, params)
    npt.assert_array_equal(y[:k], y2[:k])
    assert np.abs(y[k:] - y2[k:]).max() > 0


def test_long_rollout_stays_bounded():
    rng = np.random.default_rng(6)
    params = random_selective_params(rng, channels=4, d_state=4)
    x = rng.standard_normal((1000, 2))
    m = rng.standard_normal((1000, 2))
    y = selective_scan_sequential(x, m, params)
    assert np.all(np.isfinite(y))
    assert np.abs(y).max() < 1e4


def test_numpy_and_numba_backends_agree():
    if kernels.default_backend() != "numba":
        pytest.skip("numba backend unavailable")
    rng = np.random.default_rng(7)
    abar, bu, cseq = make_scan_arrays(rng, b=2, t=33, c=4, n=3)
    for chunk in (None, 8):
        y_np = scan_apply(abar, bu, cseq, chunk_size=chunk, backend="numpy")
        y_nb = scan_apply(abar, bu, cseq, chunk_size=chunk, backend="numba")
        npt.assert_allclose(y_nb, y_np, atol=1e-12)


# ---------------------------------------------------------------------------
# frozen-parameter LTI convolution identity


def test_lti_kernel_frozen_values():
    k = lti_convolution_kernel(np.array([[0.5]]), np.array([[1.0]]), np.array([1.0]), 3)
    npt.assert_allclose(k[:, 0], [1.0, 0.5, 0.25], rtol=1e-15)


def test_lti_kernel_zero_c():
    k = lti_convolution_kernel(np.array([[0.5]]), np.array([[1.0]]), np.array([0.0]), 4)
    npt.assert_array_equal(k, np.zeros((4, 1)))


def test_lti_kernel_rejects_bad_length():
    with pytest.raises(ValueError):
        lti_convolution_kernel(np.array([[0.5]]), np.array([[1.0]]), np.array([1.0]), 0)


def test_lti_convolution_matches_scan_at_length_14():
    rng = np.random.default_rng(8)
    C, N, T = 3, 4, 14
    abar = rng.uniform(0.1, 0.9, size=(C, N))
    bbar = rng.standard_normal((C, N))
    c = rng.standard_normal(N)
    u = rng.standard_normal((T, C))

    kern = lti_convolution_kernel(abar, bbar, c, T)
    y_conv = causal_convolve(u, kern)

    abar_seq = np.broadcast_to(abar, (1, T, C, N))
    bu = bbar[None, None] * u[None, :, :, None]
    cseq = np.broadcast_to(c, (1, T, N))
    y_scan = scan_apply(abar_seq, bu, cseq)[0]
    assert np.abs(y_conv - y_scan).max() < 1e-10


# ---------------------------------------------------------------------------
# gradients through the scan primitive


def test_scan_op_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    abar, bu, cseq = make_scan_arrays(rng, t=5, c=2, n=2)
    arrays = {"abar": abar, "bu": bu, "cseq": cseq}

    def f(p):
        y = scan_op(p["abar"], p["bu"], p["cseq"])
        return ad.sum_(ad.mul(y, y))

    assert_gradients_close(f, arrays, tol=1e-5)


def test_scan_op_chunked_backward_matches_sequential():
    rng = np.random.default_rng(11)
    abar, bu, cseq = make_scan_arrays(rng, t=12, c=3, n=2)
    grads = {}
    for chunk in (None, 4):
        ps = {k: ad.param(v) for k, v in (("abar", abar), ("bu", bu), ("cseq", cseq))}
        with Tape() as tape:
            y = scan_op(ps["abar"], ps["bu"], ps["cseq"], chunk_size=chunk)
            tape.backward(ad.sum_(ad.mul(y, y)))
        grads[chunk] = {k: p.grad for k, p in ps.items()}
    for k in grads[None]:
        npt.assert_allclose(grads[4][k], grads[None][k], atol=1e-12)


# ---------------------------------------------------------------------------
# motion-aware block


BLOCK_DIMS = SsmDims(d_model=6, d_state=3, d_motion=4, d_conv=2, expand=1)


def test_block_zero_out_projection_is_identity():
    rng = np.random.default_rng(12)
    block = MotionAwareMambaBlock(BLOCK_DIMS, rng=np.random.default_rng(0))
    u = rng.standard_normal((2, 9, BLOCK_DIMS.d_model + BLOCK_DIMS.d_motion))
    m = u[..., BLOCK_DIMS.d_model:]
    out = block.forward(Tensor(u), Tensor(m)).data
    npt.assert_array_equal(out, u)  # w_out starts at zero: exact passthrough


def test_block_reanchors_motion_channels():
    rng = np.random.default_rng(13)
    block = MotionAwareMambaBlock(BLOCK_DIMS, rng=np.random.default_rng(1))
    block.w_out.data = rng.standard_normal(block.w_out.shape) * 0.3
    d = BLOCK_DIMS.d_model
    u = rng.standard_normal((1, 7, d + BLOCK_DIMS.d_motion))
    m = rng.standard_normal((1, 7, BLOCK_DIMS.d_motion))
    out = block.forward(Tensor(u), Tensor(m)).data
    npt.assert_array_equal(out[..., d:], m)
    assert np.abs(out[..., :d] - u[..., :d]).max() > 0


def test_block_causality():
    rng = np.random.default_rng(14)
    block = MotionAwareMambaBlock(BLOCK_DIMS, rng=np.random.default_rng(2))
    block.w_out.data = rng.standard_normal(block.w_out.shape) * 0.3
    T, k = 9, 5
    u = rng.standard_normal((1, T, block.d_full))
    m = u[..., BLOCK_DIMS.d_model:]
    base = block.forward(Tensor(u), Tensor(m)).data
    u2 = u.copy()
    u2[:, k:, :BLOCK_DIMS.d_model] += 1.0
    pert = block.forward(Tensor(u2), Tensor(m)).data
    npt.assert_array_equal(base[:, :k], pert[:, :k])


def test_block_width_and_length_validation():
    block = MotionAwareMambaBlock(BLOCK_DIMS, rng=np.random.default_rng(3))
    with pytest.raises(ValueError):
        block.forward(Tensor(np.zeros((1, 4, 5))), Tensor(np.zeros((1, 4, 4))))
    with pytest.raises(ValueError):
        block.forward(Tensor(np.zeros((1, 4, block.d_full))), Tensor(np.zeros((1, 3, 4))))


def test_block_mode_validation():
    with pytest.raises(ValueError):
        MotionAwareMambaBlock(BLOCK_DIMS, motion_mode="multiply")
    with pytest.raises(ValueError):
        MotionAwareMambaBlock(BLOCK_DIMS, scan_mode="acausal")


def test_bidirectional_block_uses_future_context():
    dims = SsmDims(d_model=4, d_state=2, d_motion=2, d_conv=2, expand=1)
    block = MotionAwareMambaBlock(dims, motion_mode="none", scan_mode="bidirectional",
                                  rng=np.random.default_rng(4))
    block.w_out.data = np.random.default_rng(5).standard_normal(block.w_out.shape) * 0.3
    rng = np.random.default_rng(6)
    u = rng.standard_normal((1, 8, 4))
    base = block.forward(Tensor(u), None).data
    u2 = u.copy()
    u2[:, -1] += 1.0  # only the last step changes
    pert = block.forward(Tensor(u2), None).data
    assert np.abs(base[:, 0] - pert[:, 0]).max() > 0  # earliest output reacts


def test_block_gradients_match_finite_differences():
    dims = SsmDims(d_model=3, d_state=2, d_motion=2, d_conv=2, expand=1)
    block = MotionAwareMambaBlock(dims, rng=np.random.default_rng(7))
    rng = np.random.default_rng(8)
    block.w_out.data = rng.standard_normal(block.w_out.shape) * 0.2
    u0 = rng.standard_normal((1, 4, block.d_full))
    m0 = rng.standard_normal((1, 4, 2))
    arrays = {k: p.data.copy() for k, p in block.named_params().items()}
    arrays["u"] = u0
    arrays["m"] = m0

    def f(p):
        for k, t in block.named_params().items():
            t.data = np.asarray(p[k].data, dtype=np.float64)
        # rebuild leaf tensors so the tape sees p's entries as the leaves
        out = _block_forward_with(block, p, p["u"], p["m"])
        return ad.sum_(ad.mul(out, out))

    def _block_forward_with(blk, p, u, m):
        saved = {k: getattr(blk, k) for k in blk.named_params()}
        for k in saved:
            setattr(blk, k, p[k])
        try:
            return blk.forward(u, m)
        finally:
            for k, v in saved.items():
                setattr(blk, k, v)

    assert_gradients_close(f, arrays, tol=1e-5, max_coords_per_array=6)


def test_mamba_block_forward_array_wrapper():
    block = MotionAwareMambaBlock(BLOCK_DIMS, rng=np.random.default_rng(9))
    rng = np.random.default_rng(10)
    u = rng.standard_normal((5, block.d_full))
    m = u[:, BLOCK_DIMS.d_model:]
    out = mamba_block_forward(block, u, m)
    assert out.shape == u.shape
    npt.assert_array_equal(out, u)  # zero-init w_out


def test_selective_params_validation():
    rng = np.random.default_rng(11)
    good = random_selective_params(rng, channels=3, d_state=2)
    with pytest.raises(ValueError):
        SelectiveParams(a=np.abs(good.a), w_b=good.w_b, w_c=good.w_c,
                        w_delta=good.w_delta, b_delta=good.b_delta)
