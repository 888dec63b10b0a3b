"""Evaluation metrics: displacement errors (ADE/FDE/WDE), interaction-point
extraction against an affordance center, Gaussian-mixture affordance maps, and
saliency comparison metrics (SIM, AUC-Judd, NSS), plus grouped reporting.

Pure numpy throughout; trajectories are (N, 2) arrays in normalized canvas
coordinates, samples are (M, N, 2).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


def _dists(pred, gt) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"trajectory shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.size == 0:
        raise ValueError("empty trajectory")
    return np.sqrt(((pred - gt) ** 2).sum(axis=-1))


def ade(pred, gt) -> float:
    """Mean Euclidean displacement over waypoints."""
    return float(_dists(pred, gt).mean())


def fde(pred, gt) -> float:
    """Displacement at the final waypoint."""
    return float(_dists(pred, gt)[..., -1].mean())


def default_wde_weights(n: int) -> np.ndarray:
    """w_t proportional to t (1-based), normalized to sum n."""
    t = np.arange(1, n + 1, dtype=np.float64)
    return t * n / t.sum()


def wde(samples, gt, weights=None) -> float:
    """Mean over samples of the weighted mean displacement."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 2:
        samples = samples[None]
    gt = np.asarray(gt, dtype=np.float64)
    n = gt.shape[0]
    if weights is None:
        weights = default_wde_weights(n)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ValueError(f"weights must have shape ({n},), got {weights.shape}")
    if np.all(weights == 0):
        raise ValueError("all-zero WDE weights")
    per_sample = (_dists(samples, np.broadcast_to(gt, samples.shape)) * weights).mean(axis=-1)
    return float(per_sample.mean())


def interaction_points(samples, center) -> np.ndarray:
    """Per sampled trajectory, the waypoint closest to the affordance center
    (earliest timestep on ties). Returns (M, 2)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 2:
        samples = samples[None]
    if samples.shape[1] == 0:
        raise ValueError("empty trajectory")
    center = np.asarray(center, dtype=np.float64)
    d = np.sqrt(((samples - center) ** 2).sum(axis=-1))  # (M, N)
    idx = d.argmin(axis=1)  # argmin takes the first minimum: earliest t
    return samples[np.arange(len(samples)), idx]


def affordance_map(points, sigma: float = 0.05, resolution: int = 64) -> np.ndarray:
    """Sum of isotropic Gaussians at `points`, evaluated at grid cell centers,
    normalized to sum 1. Grid index [i, j] covers ((j+0.5)/res, (i+0.5)/res)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    centers = (np.arange(resolution) + 0.5) / resolution
    gx = centers[None, :]  # u along columns
    gy = centers[:, None]  # v along rows
    m = np.zeros((resolution, resolution))
    for u, v in points:
        m += np.exp(-((gx - u) ** 2 + (gy - v) ** 2) / (2.0 * sigma**2))
    s = m.sum()
    if s <= 0:
        raise ValueError("degenerate affordance map (zero mass)")
    return m / s


def sim(p: np.ndarray, q: np.ndarray) -> float:
    """Histogram intersection of sum-normalized maps; 1 iff equal."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"map shape mismatch: {p.shape} vs {q.shape}")
    if p.sum() <= 0 or q.sum() <= 0:
        raise ValueError("saliency map has nonpositive mass")
    return float(np.minimum(p / p.sum(), q / q.sum()).sum())


def _fixation_values(salmap: np.ndarray, fixations):
    salmap = np.asarray(salmap, dtype=np.float64)
    fix = np.asarray(fixations)
    if fix.dtype == bool:
        if fix.shape != salmap.shape:
            raise ValueError("boolean fixation mask must match map shape")
        mask = fix
    else:
        fix = np.atleast_2d(fix).astype(np.int64)
        mask = np.zeros(salmap.shape, dtype=bool)
        mask[fix[:, 0], fix[:, 1]] = True
    if not mask.any():
        raise ValueError("empty fixation set")
    return salmap, mask


def auc_judd(salmap, fixations) -> float:
    """ROC area with thresholds at the fixated saliency values; TPR over
    fixations, FPR over non-fixated cells."""
    salmap, mask = _fixation_values(salmap, fixations)
    fv = salmap[mask]
    rest = salmap[~mask]
    thresholds = np.unique(fv)[::-1]
    fprs = [0.0]
    tprs = [0.0]
    for t in thresholds:
        tprs.append(float((fv >= t).mean()))
        fprs.append(float((rest >= t).mean()) if rest.size else 0.0)
    fprs.append(1.0)
    tprs.append(1.0)
    return float(np.trapezoid(tprs, fprs))


def nss(salmap, fixations) -> float:
    """Mean z-scored saliency at fixations (population standard deviation)."""
    salmap, mask = _fixation_values(salmap, fixations)
    std = salmap.std()  # ddof=0
    if std == 0:
        raise ValueError("NSS undefined on a constant map")
    z = (salmap - salmap.mean()) / std
    return float(z[mask].mean())


@dataclass
class MetricReport:
    aggregate: dict
    per_archetype: dict
    per_sequence: list
    n_samples: int
    seeds: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "aggregate": self.aggregate,
            "per_archetype": self.per_archetype,
            "per_sequence": self.per_sequence,
            "n_samples": self.n_samples,
            "seeds": self.seeds,
        }


_METRIC_KEYS = ("ade", "fde", "wde", "sim", "auc_judd", "nss")


def per_archetype_report(rows: list, known_archetypes, n_samples: int = 1,
                         seeds=None) -> MetricReport:
    """Group per-sequence metric rows by archetype. Rows are dicts carrying an
    'archetype' key plus metric values; groups are sorted ascending by WDE."""
    known = list(known_archetypes)
    for row in rows:
        if row["archetype"] not in known:
            raise ValueError(f"unknown archetype label {row['archetype']!r}")
    groups: dict = {}
    for row in rows:
        groups.setdefault(row["archetype"], []).append(row)
    for name in known:
        if name not in groups:
            warnings.warn(f"archetype {name!r} has no sequences; omitted from report")
    per_arch = {}
    for name, members in groups.items():
        per_arch[name] = {
            k: float(np.mean([m[k] for m in members])) for k in _METRIC_KEYS if k in members[0]
        }
        per_arch[name]["count"] = len(members)
    per_arch = dict(sorted(per_arch.items(), key=lambda kv: kv[1].get("wde", 0.0)))
    aggregate = {
        k: float(np.mean([r[k] for r in rows])) for k in _METRIC_KEYS if rows and k in rows[0]
    }
    aggregate["count"] = len(rows)
    return MetricReport(aggregate=aggregate, per_archetype=per_arch,
                        per_sequence=rows, n_samples=n_samples, seeds=list(seeds or []))
