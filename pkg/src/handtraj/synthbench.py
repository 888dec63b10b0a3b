"""Synthetic egocentric benchmark: goal-directed 3D hand motion watched by a
rotating pinhole camera, with exact ground-truth homographies, noisy point
correspondences, affordance centers, and archetype labels.

The camera rotates about its center (no translation by default), so the
frame-to-canvas homographies K R_k R_t^T K^-1 are exact for any scene depth —
the reprojection residual of the stored waypoints is ~1e-15. A translation
mode exists to stress robust estimation; it breaks that exactness and is
flagged per scenario via rotation_only=false.

Datasets are JSON-Lines: one header object, then one scenario per line.
Regeneration from the same seed is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import geometry

ARCHETYPES = ("reach", "retract", "circle", "zigzag", "shake")

FORMAT_KIND = "handtraj-synthbench"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class GenConfig:
    counts: tuple = (2000, 200, 500)  # train / val / test
    n_past: int = 10
    n_future: int = 4
    fps: float = 4.0
    canvas_width: int = 512
    canvas_height: int = 512
    canvas_convention: str = "first"  # which observed frame is the canvas
    seed: int = 0
    rot_sigma_deg: float = 0.7  # per-frame rotation walk scale
    rot_max_deg: float = 12.0
    heavy_factor: float = 2.5  # egomotion-heavy rotation multiplier
    heavy_fraction: float = 0.25
    translation_sigma: float = 0.0  # >0 contaminates homography exactness
    n_correspondences: int = 16
    correspondence_noise: float = 5e-4
    outlier_rate: float = 0.1
    archetype_mix: tuple = ARCHETYPES

    def __post_init__(self):
        if self.canvas_convention not in ("first", "last"):
            raise ValueError("canvas_convention must be 'first' or 'last'")
        for a in self.archetype_mix:
            if a not in ARCHETYPES:
                raise ValueError(f"unknown archetype {a!r}")
        if len(self.counts) != 3 or any(c < 0 for c in self.counts):
            raise ValueError("counts must be three nonnegative integers")


@dataclass
class SyntheticScenario:
    id: str
    archetype: str
    split: str
    egomotion_heavy: bool
    rotation_only: bool
    fps: float
    n_past: int
    n_future: int
    canvas: dict
    intrinsics: np.ndarray  # (3,3)
    waypoints_frame: np.ndarray  # (T,2) in each frame's own image plane
    waypoints_canvas: np.ndarray  # (T,2) in the canvas frame
    homographies: np.ndarray  # (T,3,3) frame -> canvas, h33=1
    affordance_center: np.ndarray  # (2,) canvas coords
    semantic_seed: int
    correspondences: list  # T-1 dicts {src: (n,2), dst: (n,2)} frame t -> t+1

    @property
    def n_frames(self) -> int:
        return self.n_past + self.n_future

    @property
    def canvas_index(self) -> int:
        return 0 if self.canvas["convention"] == "first" else self.n_past - 1

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "archetype": self.archetype,
            "split": self.split,
            "egomotion_heavy": self.egomotion_heavy,
            "rotation_only": self.rotation_only,
            "fps": self.fps,
            "n_past": self.n_past,
            "n_future": self.n_future,
            "canvas": self.canvas,
            "intrinsics": self.intrinsics.tolist(),
            "waypoints_frame": self.waypoints_frame.tolist(),
            "waypoints_canvas": self.waypoints_canvas.tolist(),
            "homographies": self.homographies.tolist(),
            "affordance_center": self.affordance_center.tolist(),
            "semantic_seed": self.semantic_seed,
            "correspondences": [
                {
                    "src": [[round(float(x), 12) for x in p] for p in c["src"]],
                    "dst": [[round(float(x), 12) for x in p] for p in c["dst"]],
                }
                for c in self.correspondences
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SyntheticScenario":
        return cls(
            id=d["id"],
            archetype=d["archetype"],
            split=d["split"],
            egomotion_heavy=d["egomotion_heavy"],
            rotation_only=d["rotation_only"],
            fps=d["fps"],
            n_past=d["n_past"],
            n_future=d["n_future"],
            canvas=d["canvas"],
            intrinsics=np.array(d["intrinsics"], dtype=np.float64),
            waypoints_frame=np.array(d["waypoints_frame"], dtype=np.float64),
            waypoints_canvas=np.array(d["waypoints_canvas"], dtype=np.float64),
            homographies=np.array(d["homographies"], dtype=np.float64),
            affordance_center=np.array(d["affordance_center"], dtype=np.float64),
            semantic_seed=int(d["semantic_seed"]),
            correspondences=[
                {"src": np.array(c["src"], dtype=np.float64),
                 "dst": np.array(c["dst"], dtype=np.float64)}
                for c in d["correspondences"]
            ],
        )


# ---------------------------------------------------------------------------
# camera and motion primitives


def minimum_jerk(tau):
    """Smooth 0->1 progress profile with zero boundary velocity/acceleration."""
    tau = np.asarray(tau, dtype=np.float64)
    return 10 * tau**3 - 15 * tau**4 + 6 * tau**5


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _angle_walk(rng, n, sigma, amax, momentum=0.6):
    v = 0.0
    a = 0.0
    out = np.empty(n)
    out[0] = 0.0
    for t in range(1, n):
        v = momentum * v + rng.normal(0.0, sigma)
        a = a + v
        out[t] = amax * np.tanh(a / amax)
    return out


def _project(k, r, c, x):
    """Pinhole projection of world point x for camera (rotation r, center c)."""
    cam = r @ (x - c)
    if cam[2] <= 1e-6:
        return None
    p = k @ cam
    return p[:2] / p[2]


def _backproject(k, r, c, uv, depth):
    ray = np.linalg.inv(k) @ np.array([uv[0], uv[1], 1.0])
    return r.T @ (depth * ray) + c


def _hand_path(rng, archetype, x0, xg, view_dir, taus):
    d3 = xg - x0
    e1 = d3 / max(np.linalg.norm(d3), 1e-9)
    perp = np.cross(e1, view_dir)
    if np.linalg.norm(perp) < 1e-6:
        perp = np.cross(e1, np.array([0.0, 1.0, 0.0]))
    e2 = perp / max(np.linalg.norm(perp), 1e-9)
    s = minimum_jerk(taus)
    if archetype in ("reach", "retract"):
        path = x0[None] + s[:, None] * d3[None]
        interaction = x0 if archetype == "retract" else xg
    elif archetype == "zigzag":
        amp = rng.uniform(0.15, 0.3) * np.linalg.norm(d3)
        n_osc = rng.integers(2, 4)
        path = x0[None] + s[:, None] * d3[None] + (amp * np.sin(2 * np.pi * n_osc * s))[:, None] * e2[None]
        interaction = xg
    elif archetype == "circle":
        r = 0.5 * np.linalg.norm(d3)
        xc = x0 - r * e1
        total = rng.uniform(3.5, 5.5) * (1 if rng.random() < 0.5 else -1)
        ang = total * s
        path = xc[None] + r * np.cos(ang)[:, None] * e1[None] + r * np.sin(ang)[:, None] * e2[None]
        interaction = path[-1]
    elif archetype == "shake":
        amp = rng.uniform(0.03, 0.07)
        n_osc = rng.integers(2, 4)
        phase = rng.uniform(0.0, 2 * np.pi)
        drift = rng.uniform(-0.03, 0.03)
        path = (x0[None]
                + (amp * np.sin(2 * np.pi * n_osc * taus + phase) - amp * np.sin(phase))[:, None] * e2[None]
                + (drift * taus)[:, None] * e1[None])
        interaction = x0
    else:
        raise ValueError(f"unknown archetype {archetype!r}")
    return path, interaction


def generate_scenario(archetype: str, rng: np.random.Generator, cfg: GenConfig,
                      heavy: bool = False, scenario_id: str = "scn-000000",
                      split: str = "train") -> SyntheticScenario:
    """Sample one scenario; retries the whole draw when the motion leaves the
    frustum of any frame (bounded, then raises)."""
    if archetype not in ARCHETYPES:
        raise ValueError(f"unknown archetype {archetype!r}")
    t_frames = cfg.n_past + cfg.n_future
    k_idx = 0 if cfg.canvas_convention == "first" else cfg.n_past - 1
    margin = 0.02
    sig = np.deg2rad(cfg.rot_sigma_deg) * (cfg.heavy_factor if heavy else 1.0)
    amax = np.deg2rad(cfg.rot_max_deg)
    for _attempt in range(60):
        f = rng.uniform(0.8, 1.2)
        k = np.array([[f, 0.0, 0.5], [0.0, f, 0.5], [0.0, 0.0, 1.0]])
        yaw = _angle_walk(rng, t_frames, sig, amax)
        pitch = _angle_walk(rng, t_frames, sig, amax)
        roll = _angle_walk(rng, t_frames, 0.2 * sig, amax)
        rots = [_rot_z(roll[t]) @ _rot_x(pitch[t]) @ _rot_y(yaw[t]) for t in range(t_frames)]
        if cfg.translation_sigma > 0:
            steps = rng.normal(0.0, cfg.translation_sigma, size=(t_frames, 3))
            steps[0] = 0.0
            centers = np.cumsum(steps, axis=0)
        else:
            centers = np.zeros((t_frames, 3))
        rk, ck = rots[k_idx], centers[k_idx]
        z0 = rng.uniform(0.35, 0.7)
        u0 = rng.uniform(0.2, 0.8, size=2)
        ug = rng.uniform(0.25, 0.75, size=2)
        if np.linalg.norm(ug - u0) < 0.15:
            continue
        x0 = _backproject(k, rk, ck, u0, z0)
        xg = _backproject(k, rk, ck, ug, z0 * rng.uniform(0.8, 1.2))
        view_dir = rk.T @ np.array([0.0, 0.0, 1.0])
        taus = np.arange(t_frames) / (t_frames - 1)
        path, interaction = _hand_path(rng, archetype, x0, xg, view_dir, taus)

        wf = np.empty((t_frames, 2))
        wc = np.empty((t_frames, 2))
        ok = True
        for t in range(t_frames):
            pf = _project(k, rots[t], centers[t], path[t])
            pc = _project(k, rk, ck, path[t])
            if pf is None or pc is None:
                ok = False
                break
            if np.any(pf < margin) or np.any(pf > 1 - margin) or np.any(pc < margin) or np.any(pc > 1 - margin):
                ok = False
                break
            wf[t] = pf
            wc[t] = pc
        if not ok:
            continue
        o_canvas = _project(k, rk, ck, interaction)
        if o_canvas is None or np.any(o_canvas < margin) or np.any(o_canvas > 1 - margin):
            continue

        homs = np.stack([
            geometry.rotation_camera_homography(k, rk @ rots[t].T) for t in range(t_frames)
        ])
        corrs = _correspondences(rng, cfg, k, rots, centers)
        return SyntheticScenario(
            id=scenario_id,
            archetype=archetype,
            split=split,
            egomotion_heavy=heavy,
            rotation_only=cfg.translation_sigma == 0.0,
            fps=cfg.fps,
            n_past=cfg.n_past,
            n_future=cfg.n_future,
            canvas={"width": cfg.canvas_width, "height": cfg.canvas_height,
                    "convention": cfg.canvas_convention},
            intrinsics=k,
            waypoints_frame=wf,
            waypoints_canvas=wc,
            homographies=homs,
            affordance_center=np.asarray(o_canvas),
            semantic_seed=int(rng.integers(0, 2**63 - 1)),
            correspondences=corrs,
        )
    raise GenerationError(f"could not place archetype {archetype!r} inside the frustum after 60 draws")


def _correspondences(rng, cfg, k, rots, centers):
    """Static background points projected into consecutive frame pairs, with
    Gaussian noise on both sides and a fixed fraction of uniform outliers."""
    out = []
    n = cfg.n_correspondences
    n_out = int(round(cfg.outlier_rate * n))
    for t in range(len(rots) - 1):
        src = np.empty((n, 2))
        dst = np.empty((n, 2))
        for i in range(n):
            for _try in range(40):
                uv = rng.uniform(0.05, 0.95, size=2)
                depth = rng.uniform(1.2, 5.0)
                x = _backproject(k, rots[t], centers[t], uv, depth)
                p2 = _project(k, rots[t + 1], centers[t + 1], x)
                if p2 is not None and np.all(p2 > 0.02) and np.all(p2 < 0.98):
                    src[i] = uv
                    dst[i] = p2
                    break
            else:
                src[i] = uv
                dst[i] = uv  # degenerate fallback; effectively another outlier
        src += rng.normal(0.0, cfg.correspondence_noise, size=src.shape)
        dst += rng.normal(0.0, cfg.correspondence_noise, size=dst.shape)
        if n_out:
            idx = rng.choice(n, size=n_out, replace=False)
            dst[idx] = rng.uniform(0.02, 0.98, size=(n_out, 2))
        out.append({"src": src, "dst": dst})
    return out


# ---------------------------------------------------------------------------
# dataset files


def _split_of(index: int, counts) -> str:
    if index < counts[0]:
        return "train"
    if index < counts[0] + counts[1]:
        return "val"
    return "test"


def generate_dataset(cfg: GenConfig, path) -> dict:
    """Write the JSON-Lines dataset; returns the header dict. Deterministic:
    scenario i is drawn from SeedSequence(cfg.seed, spawn_key=(i,))."""
    total = int(sum(cfg.counts))
    if total < 1:
        raise ValueError("dataset must contain at least one scenario")
    mix = tuple(cfg.archetype_mix)
    heavy_period = max(2, int(round(1.0 / cfg.heavy_fraction))) if cfg.heavy_fraction > 0 else 0
    header = {
        "kind": FORMAT_KIND,
        "format_version": FORMAT_VERSION,
        "n_past": cfg.n_past,
        "n_future": cfg.n_future,
        "fps": cfg.fps,
        "canvas": {"width": cfg.canvas_width, "height": cfg.canvas_height,
                   "convention": cfg.canvas_convention},
        "seed": cfg.seed,
        "counts": {"train": cfg.counts[0], "val": cfg.counts[1], "test": cfg.counts[2]},
        "config": _config_dict(cfg),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for i in range(total):
            rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(i,)))
            heavy = heavy_period > 0 and i % heavy_period == heavy_period - 1
            scn = generate_scenario(
                mix[i % len(mix)], rng, cfg, heavy=heavy,
                scenario_id=f"scn-{i:06d}", split=_split_of(i, cfg.counts),
            )
            fh.write(json.dumps(scn.to_json_dict(), separators=(",", ":")) + "\n")
    return header


def _config_dict(cfg: GenConfig) -> dict:
    d = asdict(cfg)
    d["counts"] = list(d["counts"])
    d["archetype_mix"] = list(d["archetype_mix"])
    return d


def load_dataset(path):
    """Returns (header dict, list of SyntheticScenario)."""
    scenarios = []
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise DatasetFormatError(f"{path}: empty dataset file")
        try:
            header = json.loads(first)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"{path}: header is not valid JSON") from e
        if header.get("kind") != FORMAT_KIND:
            raise DatasetFormatError(f"{path}: not a {FORMAT_KIND} file")
        if header.get("format_version", 0) > FORMAT_VERSION:
            raise DatasetFormatError(
                f"{path}: format version {header['format_version']} newer than supported {FORMAT_VERSION}"
            )
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                scenarios.append(SyntheticScenario.from_json_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as e:
                raise DatasetFormatError(f"{path}:{lineno}: malformed scenario line") from e
    return header, scenarios


def reslice(n_frames: int, ratio: float):
    """Past/future split sizes at a different observation ratio; total length
    is preserved (no regeneration needed)."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("observation ratio must be in (0, 1)")
    n_past = int(round(n_frames * ratio))
    n_past = min(max(n_past, 2), n_frames - 1)
    return n_past, n_frames - n_past


def reslice_scenario(scn: SyntheticScenario, ratio: float) -> SyntheticScenario:
    """Move the past/future boundary of an existing scenario. Under the 'last'
    canvas convention the canvas frame moves with the boundary, so canvas-
    space fields are re-expressed in the new canvas."""
    n_past, n_future = reslice(scn.n_frames, ratio)
    wc, homs, center = scn.waypoints_canvas, scn.homographies, scn.affordance_center
    if scn.canvas["convention"] == "last" and n_past != scn.n_past:
        h_new = homs[n_past - 1]
        h_inv = np.linalg.inv(h_new)
        wc = geometry.apply_homography(h_inv, wc)
        center = geometry.apply_homography(h_inv, center)
        homs = np.stack([geometry.normalize_homography(h_inv @ h) for h in homs])
    return SyntheticScenario(
        id=scn.id, archetype=scn.archetype, split=scn.split,
        egomotion_heavy=scn.egomotion_heavy, rotation_only=scn.rotation_only,
        fps=scn.fps, n_past=n_past, n_future=n_future, canvas=dict(scn.canvas),
        intrinsics=scn.intrinsics, waypoints_frame=scn.waypoints_frame,
        waypoints_canvas=wc, homographies=homs, affordance_center=center,
        semantic_seed=scn.semantic_seed, correspondences=scn.correspondences,
    )


def estimate_homographies(scenario: SyntheticScenario, threshold: float = 2e-3,
                          max_iters: int = 500, seed: int = 0) -> np.ndarray:
    """RANSAC per consecutive pair, composed to the canvas frame — the
    estimation path a real system would use instead of the exact matrices."""
    rng = np.random.default_rng(seed)
    chain = []
    for c in scenario.correspondences:
        h, _ = geometry.ransac_homography(c["src"], c["dst"], threshold=threshold,
                                          max_iters=max_iters,
                                          seed=int(rng.integers(0, 2**31 - 1)))
        chain.append(h)
    return np.stack(geometry.compose_to_canvas(chain, scenario.canvas_index))


# ---------------------------------------------------------------------------
# semantic features

_GOAL_BASIS_SEED = 777001


def _goal_basis(n_goal: int) -> np.ndarray:
    return np.random.default_rng(_GOAL_BASIS_SEED).standard_normal((n_goal, 2))


class SyntheticSemanticProvider:
    """Stand-in for learned visual semantics: a noisy encoding of the
    interaction target *as seen in each frame's own image plane* plus a
    normalized-phase encoding. View dependence is the point — undoing it
    requires knowing the camera motion.
    """

    def __init__(self, scenario: SyntheticScenario, d_sem: int = 16,
                 noise_sigma: float = 0.05):
        if d_sem < 4:
            raise ValueError("d_sem must be >= 4")
        self.d_sem = d_sem
        t_frames = scenario.n_frames
        n_goal = d_sem // 2
        n_phase = d_sem - n_goal
        basis = _goal_basis(n_goal)
        freqs = np.arange(1, (n_phase + 1) // 2 + 1)
        rng = np.random.default_rng(np.random.PCG64(scenario.semantic_seed))
        feats = np.empty((t_frames, d_sem))
        for i in range(t_frames):
            h_inv = np.linalg.inv(scenario.homographies[i])
            goal_here = geometry.apply_homography(h_inv, scenario.affordance_center)
            feats[i, :n_goal] = np.tanh(basis @ ((goal_here - 0.5) * 3.0))
            phase = i / (t_frames - 1)
            trig = np.concatenate([np.sin(np.pi * freqs * phase), np.cos(np.pi * freqs * phase)])
            feats[i, n_goal:] = trig[:n_phase]
        feats += rng.normal(0.0, noise_sigma, size=feats.shape)
        self._feats = feats

    def features(self, lo: int = 0, hi: int | None = None) -> np.ndarray:
        return self._feats[lo:hi]

    def __call__(self, t_index: int) -> np.ndarray:
        return self._feats[t_index]
