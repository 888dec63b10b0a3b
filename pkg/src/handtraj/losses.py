"""Training losses: latent reconstruction (VLB), waypoint displacement,
clean-token regularization, and the direction/length terms on trajectory
deltas, plus their weighted total.

All functions accept Tensors or plain arrays and return scalar Tensors, so
they serve both as differentiable training objectives and as frozen-value
checks. Delta-based losses prepend the last observed waypoint, so the first
delta is (pred_0 - last_obs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_WEIGHTS = (1.0, 1.0, 0.2, 0.01, 0.01)

# stationary-delta guard: deltas with squared norm below this carry no
# direction and contribute zero to the angle term
_EPS_SQ = 1e-16


@dataclass
class LossBreakdown:
    vlb: Tensor
    dis: Tensor
    reg: Tensor
    angle: Tensor
    length: Tensor
    total: Tensor

    def as_floats(self) -> dict:
        return {
            "vlb": float(self.vlb.data),
            "dis": float(self.dis.data),
            "reg": float(self.reg.data),
            "angle": float(self.angle.data),
            "length": float(self.length.data),
            "total": float(self.total.data),
        }


def _check_same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _masked_norm(sq: Tensor) -> Tensor:
    """sqrt(sq) where sq > guard, exact 0 elsewhere (keeps backward finite at
    coincident points)."""
    nz = sq.data > _EPS_SQ
    return ad.where(nz, ad.sqrt(ad.where(nz, sq, 1.0)), 0.0)


def _mean_distance(pred: Tensor, gt: Tensor) -> Tensor:
    d = ad.sub(pred, gt)
    sq = ad.sum_(ad.mul(d, d), axis=-1)
    return ad.mean(_masked_norm(sq))


def vlb_loss(z0_hat, z0, f=None, f_hat=None) -> Tensor:
    """Sum of squared errors of the sampled-step prediction on the future
    span, plus the step-1 reconstruction term ||f - f_hat||^2 when given."""
    z0_hat, z0 = ad.astensor(z0_hat), ad.astensor(z0)
    _check_same_shape(z0_hat, z0, "vlb_loss")
    d = ad.sub(z0_hat, z0)
    out = ad.sum_(ad.mul(d, d))
    if f_hat is not None:
        f, f_hat = ad.astensor(f), ad.astensor(f_hat)
        _check_same_shape(f, f_hat, "vlb_loss reconstruction term")
        r = ad.sub(f, f_hat)
        out = ad.add(out, ad.sum_(ad.mul(r, r)))
    return out


def displacement_loss(pred, gt) -> Tensor:
    """Mean Euclidean distance between predicted and true waypoints."""
    pred, gt = ad.astensor(pred), ad.astensor(gt)
    _check_same_shape(pred, gt, "displacement_loss")
    return _mean_distance(pred, gt)


def regularization_loss(decoded_clean, gt) -> Tensor:
    """Displacement of waypoints decoded from the *undiffused* tokens; grounds
    the encoder/decoder pair."""
    decoded_clean, gt = ad.astensor(decoded_clean), ad.astensor(gt)
    _check_same_shape(decoded_clean, gt, "regularization_loss")
    return _mean_distance(decoded_clean, gt)


def _deltas(traj: Tensor, last_obs: Tensor) -> Tensor:
    """Consecutive waypoint deltas with the last observed point prepended.
    traj: (..., N_f, 2); last_obs: (..., 2). Returns (..., N_f, 2)."""
    lo = ad.reshape(last_obs, last_obs.shape[:-1] + (1, 2))
    full = ad.concat([lo, traj], axis=-2)
    return ad.sub(full[..., 1:, :], full[..., :-1, :])


def angle_loss(pred, gt, last_obs) -> Tensor:
    """Mean (1 - cos) between predicted and true delta directions; a step
    where either delta is (numerically) zero-length contributes 0."""
    pred, gt = ad.astensor(pred), ad.astensor(gt)
    _check_same_shape(pred, gt, "angle_loss")
    dp = _deltas(pred, ad.astensor(last_obs))
    dg = _deltas(gt, ad.astensor(last_obs))
    dot = ad.sum_(ad.mul(dp, dg), axis=-1)
    sq_p = ad.sum_(ad.mul(dp, dp), axis=-1)
    sq_g = ad.sum_(ad.mul(dg, dg), axis=-1)
    mask = (sq_p.data > _EPS_SQ) & (sq_g.data > _EPS_SQ)
    denom = ad.mul(ad.sqrt(ad.where(mask, sq_p, 1.0)), ad.sqrt(ad.where(mask, sq_g, 1.0)))
    cos = ad.div(dot, denom)
    term = ad.where(mask, ad.sub(1.0, cos), 0.0)
    return ad.mean(term)


def length_loss(pred, gt, last_obs) -> Tensor:
    """Mean L2 norm of the difference between predicted and true deltas."""
    pred, gt = ad.astensor(pred), ad.astensor(gt)
    _check_same_shape(pred, gt, "length_loss")
    dp = _deltas(pred, ad.astensor(last_obs))
    dg = _deltas(gt, ad.astensor(last_obs))
    diff = ad.sub(dp, dg)
    sq = ad.sum_(ad.mul(diff, diff), axis=-1)
    return ad.mean(_masked_norm(sq))


def total_loss(vlb, dis, reg, angle, length, weights=DEFAULT_WEIGHTS) -> LossBreakdown:
    weights = tuple(float(w) for w in weights)
    if len(weights) != 5:
        raise ValueError(f"expected 5 loss weights, got {len(weights)}")
    if any(w < 0 for w in weights):
        raise ValueError("loss weights must be nonnegative")
    vlb, dis, reg = ad.astensor(vlb), ad.astensor(dis), ad.astensor(reg)
    angle, length = ad.astensor(angle), ad.astensor(length)
    total = ad.mul(vlb, weights[0])
    total = ad.add(total, ad.mul(dis, weights[1]))
    total = ad.add(total, ad.mul(reg, weights[2]))
    total = ad.add(total, ad.mul(angle, weights[3]))
    total = ad.add(total, ad.mul(length, weights[4]))
    return LossBreakdown(vlb=vlb, dis=dis, reg=reg, angle=angle, length=length, total=total)
