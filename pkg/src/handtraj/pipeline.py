"""Model assembly and training: trajectory/semantic/homography encoders, token
fusion, the denoising stack, the optimization loop, prediction, evaluation,
and binary checkpoints.

The denoiser predicts clean latents as ``z_s + delta`` where delta is read out
of the block stack's final activation relative to its input. With zero-
initialized block output projections the stack is an exact residual identity
(``z0_hat == z_s`` bit for bit), which keeps early training anchored to the
observed past.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import diffusion, losses, metrics, synthbench
from .autodiff import AdamW, Tape, Tensor
from .config import ConfigError, ModelConfig
from .ssm import MotionAwareMambaBlock, SsmDims


class NonFiniteError(RuntimeError):
    """A training loss term stopped being finite."""


class CheckpointError(ValueError):
    pass


@dataclass
class TrajectorySequence:
    past: np.ndarray  # (N_p, 2) in [0,1]
    future: np.ndarray  # (N_f, 2) in [0,1]
    fps: float = 4.0
    canvas: tuple = (512, 512)

    def __post_init__(self):
        self.past = np.asarray(self.past, dtype=np.float64)
        self.future = np.asarray(self.future, dtype=np.float64)
        if self.past.ndim != 2 or self.past.shape[0] < 1 or self.past.shape[1] != 2:
            raise ValueError("past must be (N_p >= 1, 2)")
        if self.future.ndim != 2 or self.future.shape[0] < 1 or self.future.shape[1] != 2:
            raise ValueError("future must be (N_f >= 1, 2)")
        for name, w in (("past", self.past), ("future", self.future)):
            if w.min() < -1e-9 or w.max() > 1 + 1e-9:
                raise ValueError(f"{name} waypoints must lie in [0,1]")


def homography_input_vector(h) -> np.ndarray:
    """Row-major flatten(H - I) after normalizing h33 to 1; the identity maps
    to the zero vector. h: (..., 3, 3) -> (..., 9)."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-2:] != (3, 3):
        raise ValueError("homographies must be (..., 3, 3)")
    h33 = h[..., 2, 2]
    if np.any(np.abs(h33) < 1e-12):
        raise ValueError("h33 = 0: homography cannot be normalized")
    hn = h / h33[..., None, None]
    return (hn - np.eye(3)).reshape(h.shape[:-2] + (9,))


def cvh_baseline(past, n_future: int) -> np.ndarray:
    """Constant-velocity extrapolation from the last observed step, clamped to
    the canvas. past: (..., N_p >= 2, 2) -> (..., n_future, 2)."""
    past = np.asarray(past, dtype=np.float64)
    if past.shape[-2] < 2:
        raise ValueError("constant-velocity baseline needs at least 2 past waypoints")
    if n_future < 1:
        raise ValueError("n_future must be >= 1")
    v = past[..., -1, :] - past[..., -2, :]
    steps = np.arange(1, n_future + 1, dtype=np.float64)
    out = past[..., -1:, :] + steps[:, None] * v[..., None, :]
    return np.clip(out, 0.0, 1.0)


def _sinusoidal_embedding(s, dim: int) -> np.ndarray:
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = s[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if emb.shape[-1] < dim:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], dim - emb.shape[-1]))], axis=-1)
    return emb


class DenoiserStack:
    """Stacked motion-aware scan blocks (or a per-token MLP when n_blocks=0)
    with sinusoidal step embedding and a learned position table. Past span and
    motion channels are re-anchored between blocks and at the output."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        t_len = cfg.n_past + cfg.n_future
        self.block_motion = cfg.motion_mode if cfg.motion_mode in ("concat", "sum") else "none"
        self.w_s1 = ad.param(ad.init_linear(rng, d, d))
        self.b_s1 = ad.param(np.zeros(d))
        self.w_s2 = ad.param(ad.init_linear(rng, d, d))
        self.b_s2 = ad.param(np.zeros(d))
        self.pos = ad.param(rng.normal(0.0, 0.02, size=(t_len, d)))
        dims = SsmDims(d_model=d, d_state=cfg.d_state, d_motion=cfg.d_motion,
                       d_conv=cfg.d_conv, expand=cfg.expand)
        self.blocks = [
            MotionAwareMambaBlock(dims, motion_mode=self.block_motion,
                                  scan_mode=cfg.scan_mode, rng=rng)
            for _ in range(cfg.n_blocks)
        ]
        if not self.blocks:
            d_in = d + (cfg.d_motion if self.block_motion != "none" else 0)
            self.mlp_w1 = ad.param(ad.init_linear(rng, d_in, d))
            self.mlp_b1 = ad.param(np.zeros(d))
            self.mlp_w2 = ad.param(np.zeros((d, d)))  # zero init: identity stack
            self.mlp_b2 = ad.param(np.zeros(d))

    def named_params(self) -> dict:
        out = {
            "den.step.w1": self.w_s1, "den.step.b1": self.b_s1,
            "den.step.w2": self.w_s2, "den.step.b2": self.b_s2,
            "den.pos": self.pos,
        }
        if not self.blocks:
            out.update({"den.mlp.w1": self.mlp_w1, "den.mlp.b1": self.mlp_b1,
                        "den.mlp.w2": self.mlp_w2, "den.mlp.b2": self.mlp_b2})
        for i, blk in enumerate(self.blocks):
            out.update(blk.named_params(prefix=f"den.block{i}."))
        return out

    def denoise(self, z, s, m, n_past: int) -> Tensor:
        z = ad.astensor(z)
        b, t_len, d = z.shape
        if t_len != self.pos.shape[0]:
            raise ValueError(
                f"sequence length {t_len} does not match the position table ({self.pos.shape[0]})"
            )
        s_arr = np.atleast_1d(np.asarray(s, dtype=np.int64))
        if np.any(s_arr < 1) or np.any(s_arr > self.cfg.s_total):
            raise ValueError(f"step embedding index out of range [1, {self.cfg.s_total}]")
        emb = Tensor(_sinusoidal_embedding(s_arr, d))
        step = ad.linear(ad.silu(ad.linear(emb, self.w_s1, self.b_s1)), self.w_s2, self.b_s2)
        step = ad.reshape(step, (step.shape[0], 1, d))
        u0 = ad.add(ad.add(z, step), ad.reshape(self.pos, (1, t_len, d)))
        mt = None if self.block_motion == "none" else ad.astensor(m)
        if self.blocks:
            u = ad.concat([u0, mt], axis=-1) if self.block_motion == "concat" else u0
            for blk in self.blocks:
                u = blk.forward(u, mt)
                tok = u[..., :d]
                tok = ad.concat([u0[:, :n_past, :], tok[:, n_past:, :]], axis=1)
                u = ad.concat([tok, mt], axis=-1) if self.block_motion == "concat" else tok
            u_final = u[..., :d]
        else:
            u_in = ad.concat([u0, mt], axis=-1) if self.block_motion != "none" else u0
            hidden = ad.silu(ad.linear(u_in, self.mlp_w1, self.mlp_b1))
            u_final = ad.add(u0, ad.linear(hidden, self.mlp_w2, self.mlp_b2))
        delta = ad.sub(u_final, u0)
        return ad.concat([z[:, :n_past, :], ad.add(z[:, n_past:, :], delta[:, n_past:, :])], axis=1)


class Model:
    """All learned components wired together; construction order of the
    parameters is fixed so (config, seed) determines every array."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        d, dm = cfg.d_model, cfg.d_motion
        p, il = ad.param, ad.init_linear
        self.enc_w1 = p(il(rng, 2, d)); self.enc_b1 = p(np.zeros(d))
        self.enc_w2 = p(il(rng, d, d)); self.enc_b2 = p(np.zeros(d))
        self.dec_w1 = p(il(rng, d, d)); self.dec_b1 = p(np.zeros(d))
        self.dec_w2 = p(il(rng, d, 2)); self.dec_b2 = p(np.zeros(2))
        self.sem_w = p(il(rng, cfg.d_sem, d)); self.sem_b = p(np.zeros(d))
        fuse_in = 2 * d + (d if cfg.motion_mode == "fused-input" else 0)
        self.fuse_w1 = p(il(rng, fuse_in, d)); self.fuse_b1 = p(np.zeros(d))
        self.fuse_w2 = p(il(rng, d, d)); self.fuse_b2 = p(np.zeros(d))
        if cfg.motion_mode == "fused-input":
            self.mfuse_w = p(il(rng, dm, d)); self.mfuse_b = p(np.zeros(d))
        self.hom_w1 = p(il(rng, 9, dm)); self.hom_b1 = p(np.zeros(dm))
        self.hom_w2 = p(il(rng, dm, dm)); self.hom_b2 = p(np.zeros(dm))
        self.denoiser = DenoiserStack(cfg, rng)
        self.schedule = diffusion.build_sqrt_schedule(cfg.s_total, cfg.schedule_offset)

    # -- parameter plumbing

    def named_parameters(self) -> dict:
        names = ["enc_w1", "enc_b1", "enc_w2", "enc_b2",
                 "dec_w1", "dec_b1", "dec_w2", "dec_b2",
                 "sem_w", "sem_b",
                 "fuse_w1", "fuse_b1", "fuse_w2", "fuse_b2"]
        if self.config.motion_mode == "fused-input":
            names += ["mfuse_w", "mfuse_b"]
        names += ["hom_w1", "hom_b1", "hom_w2", "hom_b2"]
        out = {n.replace("_", ".", 1): getattr(self, n) for n in names}
        out.update(self.denoiser.named_params())
        return out

    def load_parameters(self, arrays: dict):
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise CheckpointError(
                f"parameter names do not match the config: missing={missing[:3]} extra={extra[:3]}"
            )
        for name, t in params.items():
            a = np.asarray(arrays[name])
            if a.shape != t.data.shape:
                raise CheckpointError(
                    f"parameter {name}: stored shape {a.shape} != expected {t.data.shape}"
                )
            t.data = a.astype(np.float64, copy=True)

    # -- tokenizer components

    def encode_trajectory(self, waypoints) -> Tensor:
        w = ad.astensor(waypoints)
        if w.shape[-1] != 2:
            raise ValueError("waypoints must have a trailing (u, v) axis")
        if w.data.min() < -1e-9 or w.data.max() > 1 + 1e-9:
            raise ValueError("waypoint coordinate outside [0,1]")
        h = ad.silu(ad.linear(w, self.enc_w1, self.enc_b1))
        return ad.linear(h, self.enc_w2, self.enc_b2)

    def decode_trajectory(self, latents) -> Tensor:
        h = ad.silu(ad.linear(ad.astensor(latents), self.dec_w1, self.dec_b1))
        return ad.sigmoid(ad.linear(h, self.dec_w2, self.dec_b2))

    def encode_homography(self, homographies) -> Tensor:
        v = Tensor(homography_input_vector(homographies))
        h = ad.silu(ad.linear(v, self.hom_w1, self.hom_b1))
        return ad.linear(h, self.hom_w2, self.hom_b2)

    def fuse_tokens(self, semantics, traj_features, m=None) -> Tensor:
        sem = ad.astensor(semantics)
        feats = ad.astensor(traj_features)
        if sem.shape[-2] != feats.shape[-2]:
            raise ValueError(
                f"semantic/trajectory length mismatch: {sem.shape[-2]} vs {feats.shape[-2]}"
            )
        parts = [ad.linear(sem, self.sem_w, self.sem_b), feats]
        if self.config.motion_mode == "fused-input":
            if m is None:
                raise ValueError("fused-input mode requires motion features at fusion")
            parts.append(ad.linear(ad.astensor(m), self.mfuse_w, self.mfuse_b))
        cat = ad.concat(parts, axis=-1)
        h = ad.silu(ad.linear(cat, self.fuse_w1, self.fuse_b1))
        return ad.linear(h, self.fuse_w2, self.fuse_b2)

    def tokenize(self, waypoints, semantics, homographies):
        """(B,T,2), (B,T,d_sem), (B,T,3,3) -> fused tokens F and motion
        features m, both Tensors."""
        m = self.encode_homography(homographies)
        feats = self.encode_trajectory(waypoints)
        fused = self.fuse_tokens(semantics, feats, m=m)
        return fused, m

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint") -> "Model":
        cfg = ModelConfig.from_dict(ckpt.config)
        model = cls(cfg)
        model.load_parameters(ckpt.params)
        return model


# ---------------------------------------------------------------------------
# training


@dataclass
class Checkpoint:
    config: dict
    params: dict  # name -> ndarray
    opt_state: dict | None = None  # "opt.m.<name>"/"opt.v.<name>" -> ndarray
    opt_t: int = 0
    seed: int | None = None
    train_step: int = 0
    version: int = 1


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list  # one dict of mean loss terms per epoch
    model: Model
    steps: int = 0


def scenario_arrays(scenarios, cfg: ModelConfig, observed_only: bool = False) -> dict:
    """Stack scenario fields into batch arrays. Training uses the full
    sequence (semantics and homographies known through the future); with
    observed_only the future halves are tiled from the last observation, the
    way inference sees the world."""
    t_len = cfg.n_past + cfg.n_future
    for s in scenarios:
        if s.n_frames != t_len or s.n_past != cfg.n_past:
            raise ConfigError(
                f"scenario {s.id}: layout {s.n_past}+{s.n_future} does not match config "
                f"{cfg.n_past}+{cfg.n_future}"
            )
    wps = np.stack([s.waypoints_canvas for s in scenarios])
    homs = np.stack([s.homographies for s in scenarios])
    sem = np.stack([
        synthbench.SyntheticSemanticProvider(s, d_sem=cfg.d_sem).features()
        for s in scenarios
    ])
    if observed_only:
        np_ = cfg.n_past
        homs = np.concatenate(
            [homs[:, :np_], np.repeat(homs[:, np_ - 1:np_], cfg.n_future, axis=1)], axis=1)
        if cfg.future_semantics == "zeros":
            sem = np.concatenate([sem[:, :np_], np.zeros_like(sem[:, np_:])], axis=1)
        else:
            sem = np.concatenate(
                [sem[:, :np_], np.repeat(sem[:, np_ - 1:np_], cfg.n_future, axis=1)], axis=1)
    return {
        "waypoints": wps,
        "homographies": homs,
        "semantics": sem,
        "archetypes": [s.archetype for s in scenarios],
        "centers": np.stack([s.affordance_center for s in scenarios]),
    }


def _clip_gradients(params: dict, max_norm: float) -> float:
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float(np.sum(t.grad * t.grad))
    norm = float(np.sqrt(total))
    if max_norm and max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad *= scale
    return norm


_LOSS_KEYS = ("vlb", "dis", "reg", "angle", "length", "total")


def train(dataset, config: ModelConfig, seed: int | None = None,
          csv_path=None, resume: Checkpoint | None = None) -> TrainResult:
    """Optimize the model on training scenarios. dataset may be a synthbench
    file path (its train split is used) or a list of scenarios (used as-is).
    Deterministic in (dataset, config, seed)."""
    cfg = config
    seed = cfg.seed if seed is None else seed
    if isinstance(dataset, (str, bytes)) or hasattr(dataset, "__fspath__"):
        _, all_scn = synthbench.load_dataset(dataset)
        scenarios = [s for s in all_scn if s.split == "train"]
    else:
        scenarios = list(dataset)
    if not scenarios:
        raise ValueError("no training scenarios")
    arrs = scenario_arrays(scenarios, cfg)
    if resume is not None:
        model = Model.from_checkpoint(resume)
        step = resume.train_step
    else:
        model = Model(cfg, rng=np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(100,))))
        step = 0
    params = model.named_parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if resume is not None and resume.opt_state:
        opt.load_state_arrays(resume.opt_state, resume.opt_t)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(101,)))
    schedule = model.schedule
    n = len(scenarios)
    np_, nf, d = cfg.n_past, cfg.n_future, cfg.d_model
    history = []
    rows = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = dict.fromkeys(_LOSS_KEYS, 0.0)
        batches = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            b = len(idx)
            wps = arrs["waypoints"][idx]
            gt_future = Tensor(wps[:, np_:])
            last_obs = Tensor(wps[:, np_ - 1])
            s = rng.integers(min(2, cfg.s_total), cfg.s_total + 1, size=b)
            noise = rng.standard_normal((b, nf, d))
            with_recon = cfg.recon_every > 0 and step % cfg.recon_every == 0
            noise1 = rng.standard_normal((b, nf, d)) if with_recon else None
            with Tape() as tape:
                fused, m = model.tokenize(wps, arrs["semantics"][idx],
                                          arrs["homographies"][idx])
                # the denoiser sees the clean tokens as fixed arrays (both as
                # noising input and as regression target): backpropagating the
                # VLB into the tokenizer either collapses the tokens to a
                # constant or turns them into a moving target the denoiser
                # chases without converging. The tokenizer itself trains
                # through the decoded-waypoint terms below.
                target = Tensor(fused.data.copy())
                lat = diffusion.q_sample_partial(target, s, schedule, noise, np_)
                z0_hat = model.denoiser.denoise(lat.z, s, m, np_)
                f_hat = None
                if with_recon:
                    lat1 = diffusion.q_sample_partial(target, 1, schedule, noise1, np_)
                    f_hat = model.denoiser.denoise(lat1.z, 1, m, np_)
                vlb = ad.div(losses.vlb_loss(z0_hat, target,
                                             f=target if with_recon else None,
                                             f_hat=f_hat), float(b))
                pred = model.decode_trajectory(z0_hat[:, np_:])
                clean_dec = model.decode_trajectory(fused[:, np_:])
                dis = losses.displacement_loss(pred, gt_future)
                reg = losses.regularization_loss(clean_dec, gt_future)
                angle = losses.angle_loss(pred, gt_future, last_obs)
                length = losses.length_loss(pred, gt_future, last_obs)
                breakdown = losses.total_loss(vlb, dis, reg, angle, length,
                                              weights=cfg.loss_weights)
            values = breakdown.as_floats()
            for key in _LOSS_KEYS:
                if not np.isfinite(values[key]):
                    raise NonFiniteError(
                        f"non-finite loss term {key!r} ({values[key]}) at epoch {epoch} step {step}"
                    )
            tape.backward(breakdown.total)
            _clip_gradients(params, cfg.grad_clip)
            opt.step()
            opt.zero_grad()
            step += 1
            batches += 1
            for key in _LOSS_KEYS:
                sums[key] += values[key]
            rows.append({"epoch": epoch, "step": step, **values})
        history.append({"epoch": epoch,
                        **{k: sums[k] / max(batches, 1) for k in _LOSS_KEYS}})
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "step", *_LOSS_KEYS])
            writer.writeheader()
            writer.writerows(rows)
    ckpt = Checkpoint(
        config=cfg.to_dict(),
        params={k: t.data.copy() for k, t in params.items()},
        opt_state={k: v.copy() for k, v in opt.state_arrays().items()},
        opt_t=opt.t,
        seed=seed,
        train_step=step,
    )
    return TrainResult(checkpoint=ckpt, history=history, model=model, steps=step)


# ---------------------------------------------------------------------------
# prediction / evaluation


def predict(model: Model, past_waypoints, homographies, semantics_past,
            n_samples: int = 10, seed: int = 0, counter: dict | None = None) -> np.ndarray:
    """Sample n_samples futures; returns (n_samples, B, N_f, 2). Future motion
    features are tiled from the last observation and future semantics follow
    the config (tile-last or zeros); each sample uses a derived seed."""
    cfg = model.config
    past = np.asarray(past_waypoints, dtype=np.float64)
    squeeze = past.ndim == 2
    if squeeze:
        past = past[None]
    homs = np.asarray(homographies, dtype=np.float64)
    if homs.ndim == 3:
        homs = homs[None]
    sem = np.asarray(semantics_past, dtype=np.float64)
    if sem.ndim == 2:
        sem = sem[None]
    b, np_, _ = past.shape
    if np_ != cfg.n_past:
        raise ConfigError(f"checkpoint expects {cfg.n_past} past waypoints, got {np_}")
    if homs.shape[1] < np_ or sem.shape[1] < np_:
        raise ConfigError("homographies and semantics must cover the observed span")
    homs, sem = homs[:, :np_], sem[:, :np_]
    nf = cfg.n_future
    hom_full = np.concatenate([homs, np.repeat(homs[:, -1:], nf, axis=1)], axis=1)
    if cfg.future_semantics == "zeros":
        sem_future = np.zeros((b, nf, sem.shape[-1]))
    else:
        sem_future = np.repeat(sem[:, -1:], nf, axis=1)
    m_full = model.encode_homography(hom_full).data
    feats_past = model.encode_trajectory(past)
    m_past_t = Tensor(m_full[:, :np_])
    f_past = model.fuse_tokens(sem[:, :np_], feats_past, m=m_past_t).data
    respaced = diffusion.respace_steps(cfg.s_total, cfg.respacing)
    out = np.empty((n_samples, b, nf, 2))
    for j in range(n_samples):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(j,)))
        out[j] = diffusion.infer_trajectory(
            f_past, m_full, model, model.schedule, respaced, rng, nf,
            sem_future=sem_future, use_cdc=cfg.cdc,
            resolution=(cfg.canvas_width, cfg.canvas_height),
            m_future=m_full[:, np_:], counter=counter,
        )
    return out[:, 0] if squeeze else out


def _affordance_fixation_mask(center, resolution: int = 64) -> np.ndarray:
    mask = np.zeros((resolution, resolution), dtype=bool)
    j = min(int(center[0] * resolution), resolution - 1)
    i = min(int(center[1] * resolution), resolution - 1)
    mask[i, j] = True
    return mask


def evaluate_model(model: Model, scenarios, n_samples: int = 4, seed: int = 0,
                   batch_size: int = 256,
                   use_estimated_homographies: bool = False) -> metrics.MetricReport:
    """Per-scenario displacement and affordance metrics, aggregated per
    archetype. ADE/FDE are means over the sampled futures; WDE weights later
    timesteps more; SIM/AUC/NSS compare the sample interaction map to the true
    affordance center."""
    cfg = model.config
    rows = []
    for lo in range(0, len(scenarios), batch_size):
        chunk = scenarios[lo:lo + batch_size]
        arrs = scenario_arrays(chunk, cfg)
        wps = arrs["waypoints"]
        homs = arrs["homographies"]
        if use_estimated_homographies:
            homs = np.stack([
                synthbench.estimate_homographies(s, seed=seed + lo + i)
                for i, s in enumerate(chunk)
            ])
        sem = arrs["semantics"]
        preds = predict(model, wps[:, :cfg.n_past], homs[:, :cfg.n_past],
                        sem[:, :cfg.n_past], n_samples=n_samples, seed=seed + lo)
        gt = wps[:, cfg.n_past:]
        for i, scn in enumerate(chunk):
            samples = preds[:, i]
            gt_i = gt[i]
            row = {
                "id": scn.id,
                "archetype": scn.archetype,
                "egomotion_heavy": scn.egomotion_heavy,
                "ade": float(np.mean([metrics.ade(s_, gt_i) for s_ in samples])),
                "fde": float(np.mean([metrics.fde(s_, gt_i) for s_ in samples])),
                "wde": metrics.wde(samples, gt_i),
            }
            ipts = metrics.interaction_points(samples, scn.affordance_center)
            pred_map = metrics.affordance_map(ipts)
            fix = _affordance_fixation_mask(scn.affordance_center)
            gt_map = metrics.affordance_map(scn.affordance_center[None])
            row["sim"] = metrics.sim(pred_map, gt_map)
            row["auc_judd"] = metrics.auc_judd(pred_map, fix)
            row["nss"] = metrics.nss(pred_map, fix)
            rows.append(row)
    return metrics.per_archetype_report(rows, synthbench.ARCHETYPES,
                                        n_samples=n_samples, seeds=[seed])


def evaluate_cvh(scenarios, n_past: int) -> metrics.MetricReport:
    """The constant-velocity baseline pushed through the same metric path
    (single deterministic sample)."""
    rows = []
    for scn in scenarios:
        wps = scn.waypoints_canvas
        pred = cvh_baseline(wps[:n_past], scn.n_frames - n_past)
        gt = wps[n_past:]
        samples = pred[None]
        ipts = metrics.interaction_points(samples, scn.affordance_center)
        pred_map = metrics.affordance_map(ipts)
        fix = _affordance_fixation_mask(scn.affordance_center)
        gt_map = metrics.affordance_map(scn.affordance_center[None])
        rows.append({
            "id": scn.id, "archetype": scn.archetype,
            "egomotion_heavy": scn.egomotion_heavy,
            "ade": metrics.ade(pred, gt), "fde": metrics.fde(pred, gt),
            "wde": metrics.wde(samples, gt),
            "sim": metrics.sim(pred_map, gt_map),
            "auc_judd": metrics.auc_judd(pred_map, fix),
            "nss": metrics.nss(pred_map, fix),
        })
    return metrics.per_archetype_report(rows, synthbench.ARCHETYPES, n_samples=1)


# ---------------------------------------------------------------------------
# checkpoint persistence

_MAGIC = b"MADF"
_VERSION = 1


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout: magic, u32 version, u64 header length, UTF-8 JSON header
    (array names/shapes/dtypes in order, config, counters), then the raw
    little-endian array bytes in header order."""
    arrays = []
    for name in sorted(ckpt.params):
        arrays.append((name, np.ascontiguousarray(ckpt.params[name])))
    if ckpt.opt_state:
        for name in sorted(ckpt.opt_state):
            arrays.append((name, np.ascontiguousarray(ckpt.opt_state[name])))
    header = {
        "config": ckpt.config,
        "arrays": [[n, list(a.shape), a.dtype.str] for n, a in arrays],
        "opt_t": ckpt.opt_t,
        "seed": ckpt.seed,
        "train_step": ckpt.train_step,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        head = fh.read(12)
        if len(head) < 12:
            raise CheckpointError(f"{path}: truncated header")
        version, = struct.unpack("<I", head[:4])
        if version > _VERSION:
            raise CheckpointError(
                f"{path}: format version {version} newer than supported {_VERSION}"
            )
        hlen, = struct.unpack("<Q", head[4:12])
        blob = fh.read(hlen)
        if len(blob) < hlen:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: corrupt header") from e
        params: dict = {}
        opt_state: dict = {}
        for name, shape, dtype_str in header["arrays"]:
            dt = np.dtype(dtype_str)
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * dt.itemsize)
            if len(raw) < count * dt.itemsize:
                raise CheckpointError(f"{path}: truncated array {name!r}")
            arr = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
            (opt_state if name.startswith("opt.") else params)[name] = arr
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after arrays")
    return Checkpoint(
        config=header["config"],
        params=params,
        opt_state=opt_state or None,
        opt_t=header.get("opt_t", 0),
        seed=header.get("seed"),
        train_step=header.get("train_step", 0),
        version=version,
    )
