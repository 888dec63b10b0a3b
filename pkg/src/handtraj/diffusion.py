"""Partial-noising diffusion: sqrt noise schedule, forward corruption of the
future span only, ancestral reverse sampling with anchoring, pixel-grid CDC
refinement, and the full inference loop.

Latent layout: z has shape (B, T, d) with T = n_past + n_future; the past span
z[:, :n_past] always equals the clean past tokens (anchoring invariant), only
the future span is ever noised or denoised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class NoiseSchedule:
    s_total: int
    beta: np.ndarray  # (S,), beta[i] is beta_{i+1}
    alpha_bar: np.ndarray  # (S,), cumprod of (1 - beta)
    s0: float

    def raw_target(self, s) -> np.ndarray:
        """The defining curve 1 - sqrt(s/S + s0) the betas were fit to."""
        return 1.0 - np.sqrt(np.asarray(s, dtype=np.float64) / self.s_total + self.s0)

    def abar_at(self, s):
        """alpha_bar(s) with alpha_bar(0) = 1 (array-friendly)."""
        s = np.asarray(s)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[s]


def build_sqrt_schedule(s_total: int, s0: float = 1e-4) -> NoiseSchedule:
    """beta_s = clip(1 - raw(s)/raw(s-1), 0, 0.999) against the sqrt curve,
    then alpha_bar recomputed as cumprod(1 - beta) so positivity holds even
    where the raw curve crosses zero near s = S."""
    if s_total < 1:
        raise ValueError("schedule needs at least one step")
    if not 0.0 < s0 < 1.0:
        raise ValueError("s0 must lie in (0, 1)")
    s = np.arange(0, s_total + 1, dtype=np.float64)
    raw = 1.0 - np.sqrt(s / s_total + s0)
    prev, cur = raw[:-1], raw[1:]
    ratio = np.where(prev > 1e-12, cur / np.maximum(prev, 1e-12), 0.0)
    beta = np.clip(1.0 - ratio, 0.0, 0.999)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(s_total=s_total, beta=beta, alpha_bar=alpha_bar, s0=s0)


def respace_steps(s_total: int, n: int) -> np.ndarray:
    """Decreasing subsequence of diffusion steps for respaced inference."""
    if n < 1:
        raise ValueError("empty respacing")
    raw = np.round(np.linspace(s_total, 1, min(n, s_total))).astype(np.int64)
    steps = np.unique(raw)[::-1]
    return steps


@dataclass
class DiffusionLatent:
    z: object  # (B, T, d) Tensor or ndarray
    s: object  # int or (B,) int array
    n_past: int


def _split(z, n_past):
    if isinstance(z, Tensor):
        return z[:, :n_past], z[:, n_past:]
    return z[:, :n_past], z[:, n_past:]


def q_sample_partial(f, s, schedule: NoiseSchedule, noise, n_past: int) -> DiffusionLatent:
    """Corrupt only the future span: sqrt(abar_s) F + sqrt(1-abar_s) noise.

    f: (B, T, d) tokens (Tensor or array); s: int or (B,) ints in [1, S];
    noise: (B, T-n_past, d) standard normal draws.
    """
    s_arr = np.asarray(s)
    if np.any(s_arr < 1) or np.any(s_arr > schedule.s_total):
        raise ValueError(f"diffusion step out of range [1, {schedule.s_total}]")
    abar = schedule.alpha_bar[s_arr - 1]
    c1 = np.sqrt(abar)
    c2 = np.sqrt(1.0 - abar)
    if s_arr.ndim == 1:
        c1 = c1[:, None, None]
        c2 = c2[:, None, None]
    past, future = _split(f, n_past)
    if isinstance(f, Tensor):
        noised = ad.add(ad.mul(future, c1), Tensor(c2 * np.asarray(noise)))
        z = ad.concat([past, noised], axis=1)
    else:
        z = np.concatenate([past, c1 * future + c2 * noise], axis=1)
    return DiffusionLatent(z=z, s=s, n_past=n_past)


def denoise_step(lat: DiffusionLatent, m, stack) -> object:
    """Predict the clean latents from z_s; anchoring is the stack's contract
    (past span of the return equals lat.z's past span bit-identically)."""
    return stack.denoise(lat.z, lat.s, m, lat.n_past)


def posterior_sample(z_s, z0_hat, s: int, schedule: NoiseSchedule, noise,
                     n_past: int, s_prev: int | None = None) -> np.ndarray:
    """DDPM posterior q(z_{s_prev} | z_s, z0) on the future span, supporting
    respaced jumps. s_prev = 0 returns the predicted clean future exactly."""
    if s_prev is None:
        s_prev = s - 1
    if s < 1:
        raise ValueError("posterior step requires s >= 1")
    zs = z_s.data if isinstance(z_s, Tensor) else np.asarray(z_s)
    z0 = z0_hat.data if isinstance(z0_hat, Tensor) else np.asarray(z0_hat)
    abar_s = float(schedule.abar_at(s))
    abar_p = float(schedule.abar_at(s_prev))
    alpha_eff = abar_s / abar_p
    beta_eff = 1.0 - alpha_eff
    denom = 1.0 - abar_s
    coef0 = np.sqrt(abar_p) * beta_eff / denom
    coefs = np.sqrt(alpha_eff) * (1.0 - abar_p) / denom
    var = beta_eff * (1.0 - abar_p) / denom
    past = zs[:, :n_past]
    mean = coef0 * z0[:, n_past:] + coefs * zs[:, n_past:]
    if var > 0 and noise is not None:
        mean = mean + np.sqrt(var) * noise
    return np.concatenate([past, mean], axis=1)


def cdc_refine(z0_hat, model, sem_future: np.ndarray, resolution, n_past: int,
               counter: dict | None = None, m_future=None):
    """Continuous-discrete-continuous step: decode the future latents, snap the
    waypoints to the pixel grid, re-encode, re-fuse with semantic features, and
    replace the future span. Inference-only (no tape)."""
    z0 = z0_hat.data if isinstance(z0_hat, Tensor) else np.asarray(z0_hat)
    res_w, res_h = resolution
    wps = model.decode_trajectory(Tensor(z0[:, n_past:])).data
    clamped = np.clip(wps, 0.0, 1.0)
    if counter is not None:
        counter["clamped"] = counter.get("clamped", 0) + int((wps != clamped).sum())
    snapped = np.empty_like(clamped)
    snapped[..., 0] = np.round(clamped[..., 0] * res_w) / res_w
    snapped[..., 1] = np.round(clamped[..., 1] * res_h) / res_h
    feats = model.encode_trajectory(Tensor(snapped)).data
    fused = model.fuse_tokens(Tensor(sem_future), Tensor(feats), m=m_future).data
    return np.concatenate([z0[:, :n_past], fused], axis=1)


def infer_trajectory(f_past: np.ndarray, m: np.ndarray, model, schedule: NoiseSchedule,
                     respaced: np.ndarray, rng: np.random.Generator, n_future: int,
                     sem_future: np.ndarray | None = None, use_cdc: bool = True,
                     resolution=(512, 512), m_future=None, counter: dict | None = None):
    """Full reverse chain; returns future waypoints (B, n_future, 2).

    z_S = [F_past ; N(0,1)]; each respaced step runs denoise -> (cdc) ->
    posterior; the terminal jump to s_prev=0 reads out the clean prediction.
    """
    respaced = np.asarray(respaced, dtype=np.int64)
    if respaced.size == 0:
        raise ValueError("empty respacing")
    b, n_past, d = f_past.shape
    z = np.concatenate([f_past, rng.standard_normal((b, n_future, d))], axis=1)
    stack = model.denoiser
    for i, s in enumerate(respaced):
        s = int(s)
        s_prev = int(respaced[i + 1]) if i + 1 < len(respaced) else 0
        z0_hat = stack.denoise(Tensor(z), s, Tensor(m), n_past).data
        if use_cdc and sem_future is not None:
            z0_hat = cdc_refine(z0_hat, model, sem_future, resolution, n_past,
                                counter=counter, m_future=m_future)
        noise = rng.standard_normal((b, n_future, d)) if s_prev > 0 else None
        z = posterior_sample(z, z0_hat, s, schedule, noise, n_past, s_prev=s_prev)
    return model.decode_trajectory(Tensor(z[:, n_past:])).data
