"""End-to-end pipeline tests: tokenizer components, the constant-velocity
baseline, training smoke runs with determinism checks, prediction sampling,
evaluation reports, checkpoint persistence, and the structural ablation
variants.
"""

import dataclasses

import numpy as np
import numpy.testing as npt
import pytest

from handtraj.config import ConfigError, ModelConfig, reference_config, toy_config
from handtraj.pipeline import (
    Checkpoint,
    CheckpointError,
    Model,
    NonFiniteError,
    TrajectorySequence,
    cvh_baseline,
    evaluate_cvh,
    evaluate_model,
    homography_input_vector,
    load_checkpoint,
    predict,
    save_checkpoint,
    scenario_arrays,
    train,
)

from gradcheck import assert_gradients_close


def model_for(cfg_overrides=None, seed=0):
    cfg = toy_config(d_model=12, d_sem=6, d_motion=6, d_state=3, n_blocks=2,
                     s_total=40, respacing=5, **(cfg_overrides or {}))
    return Model(cfg, rng=np.random.default_rng(seed)), cfg


# ---------------------------------------------------------------------------
# domain types


def test_trajectory_sequence_validation():
    past = np.full((10, 2), 0.5)
    future = np.full((4, 2), 0.5)
    seq = TrajectorySequence(past=past, future=future)
    assert seq.past.shape == (10, 2)
    with pytest.raises(ValueError):
        TrajectorySequence(past=past * 3.0, future=future)  # out of range
    with pytest.raises(ValueError):
        TrajectorySequence(past=past[:, :1], future=future)
    with pytest.raises(ValueError):
        TrajectorySequence(past=past[:0], future=future)


# ---------------------------------------------------------------------------
# homography input vector


def test_homography_vector_identity_is_zero():
    npt.assert_array_equal(homography_input_vector(np.eye(3)), np.zeros(9))


def test_homography_vector_translation_has_two_nonzeros():
    h = np.eye(3)
    h[0, 2] = 1.0 / 512
    h[1, 2] = 2.0 / 512
    v = homography_input_vector(h)
    assert np.count_nonzero(v) == 2
    npt.assert_allclose(v[2], 1.0 / 512, rtol=1e-15)
    npt.assert_allclose(v[5], 2.0 / 512, rtol=1e-15)


def test_homography_vector_scale_normalized():
    rng = np.random.default_rng(0)
    h = np.eye(3) + 0.01 * rng.standard_normal((3, 3))
    npt.assert_allclose(homography_input_vector(2.5 * h),
                        homography_input_vector(h), rtol=1e-12)


def test_homography_vector_rejects_zero_h33():
    h = np.eye(3)
    h[2, 2] = 0.0
    with pytest.raises(ValueError):
        homography_input_vector(h)


# ---------------------------------------------------------------------------
# constant-velocity baseline


def test_cvh_stationary_hand_stays_put():
    past = np.tile([0.4, 0.6], (5, 1))
    pred = cvh_baseline(past, 3)
    npt.assert_array_equal(pred, np.tile([0.4, 0.6], (3, 1)))


def test_cvh_extrapolates_last_velocity():
    past = np.array([[0.5, 0.5], [0.6, 0.5]])
    pred = cvh_baseline(past, 3)
    npt.assert_allclose(pred, [[0.7, 0.5], [0.8, 0.5], [0.9, 0.5]], rtol=1e-12)


def test_cvh_clamps_at_canvas_boundary():
    past = np.array([[0.7, 0.5], [0.9, 0.5]])
    pred = cvh_baseline(past, 3)
    npt.assert_allclose(pred[:, 0], [1.0, 1.0, 1.0], rtol=1e-12)


def test_cvh_needs_two_points():
    with pytest.raises(ValueError):
        cvh_baseline(np.array([[0.5, 0.5]]), 2)


# ---------------------------------------------------------------------------
# tokenizer components


def test_encoder_is_stateless_per_timestep():
    model, cfg = model_for()
    w = np.full((1, 3, 2), 0.25)
    feats = model.encode_trajectory(w).data
    npt.assert_array_equal(feats[0, 0], feats[0, 1])
    npt.assert_array_equal(feats[0, 0], feats[0, 2])
    assert feats.shape == (1, 3, cfg.d_model)


def test_encoder_rejects_out_of_range():
    model, _ = model_for()
    with pytest.raises(ValueError):
        model.encode_trajectory(np.full((1, 2, 2), 1.5))


def test_decoder_outputs_in_unit_square():
    model, cfg = model_for()
    rng = np.random.default_rng(1)
    z = rng.standard_normal((2, 5, cfg.d_model)) * 10
    w = model.decode_trajectory(z).data
    assert w.shape == (2, 5, 2)
    assert w.min() > 0.0 and w.max() < 1.0


def test_fuse_rejects_length_mismatch():
    model, cfg = model_for()
    sem = np.zeros((1, 4, cfg.d_sem))
    feats = model.encode_trajectory(np.full((1, 5, 2), 0.5))
    with pytest.raises(ValueError):
        model.fuse_tokens(sem, feats)


def test_fused_input_mode_requires_motion():
    model, cfg = model_for({"motion_mode": "fused-input"})
    sem = np.zeros((1, 4, cfg.d_sem))
    feats = model.encode_trajectory(np.full((1, 4, 2), 0.5))
    with pytest.raises(ValueError):
        model.fuse_tokens(sem, feats)  # m is mandatory in this mode


def test_tokenize_shapes():
    model, cfg = model_for()
    T = cfg.n_past + cfg.n_future
    wps = np.full((2, T, 2), 0.5)
    sem = np.zeros((2, T, cfg.d_sem))
    homs = np.tile(np.eye(3), (2, T, 1, 1))
    fused, m = model.tokenize(wps, sem, homs)
    assert fused.shape == (2, T, cfg.d_model)
    assert m.shape == (2, T, cfg.d_motion)


def test_tokenizer_gradients():
    model, cfg = model_for()
    rng = np.random.default_rng(2)
    wps = rng.uniform(0.2, 0.8, size=(1, 3, 2))
    sem = rng.standard_normal((1, 3, cfg.d_sem))
    names = ["enc_w1", "enc_b1", "enc_w2", "enc_b2", "fuse_w1", "fuse_b1",
             "fuse_w2", "fuse_b2", "sem_w", "sem_b"]
    arrays = {n: getattr(model, n).data.copy() for n in names}

    def f(p):
        saved = {n: getattr(model, n) for n in names}
        for n in names:
            setattr(model, n, p[n])
        try:
            import handtraj.autodiff as ad
            feats = model.encode_trajectory(wps)
            fused = model.fuse_tokens(sem, feats)
            return ad.sum_(ad.mul(fused, fused))
        finally:
            for n, v in saved.items():
                setattr(model, n, v)

    assert_gradients_close(f, arrays, tol=1e-5, max_coords_per_array=8)


# ---------------------------------------------------------------------------
# parameter registry


def test_named_parameters_cover_all_components():
    model, cfg = model_for()
    names = set(model.named_parameters())
    assert "enc.w1" in names
    assert "dec.w2" in names
    assert "hom.w1" in names
    assert any(n.startswith("den.") for n in names)
    assert "den.block0.w_out" in names


def test_load_parameters_validates(tmp_path):
    model, cfg = model_for()
    arrays = {k: v.data.copy() for k, v in model.named_parameters().items()}

    missing = dict(arrays)
    missing.pop("enc.w1")
    with pytest.raises(CheckpointError, match="missing"):
        model.load_parameters(missing)

    extra = dict(arrays)
    extra["bogus.w"] = np.zeros(3)
    with pytest.raises(CheckpointError, match="extra"):
        model.load_parameters(extra)

    bad_shape = dict(arrays)
    bad_shape["enc.w1"] = np.zeros((1, 1))
    with pytest.raises(CheckpointError, match="shape"):
        model.load_parameters(bad_shape)


# ---------------------------------------------------------------------------
# scenario arrays


def test_scenario_arrays_shapes(tiny_dataset, tiny_config):
    _, _, scenarios = tiny_dataset
    arrs = scenario_arrays(scenarios[:6], tiny_config)
    T = tiny_config.n_past + tiny_config.n_future
    assert arrs["waypoints"].shape == (6, T, 2)
    assert arrs["semantics"].shape == (6, T, tiny_config.d_sem)
    assert arrs["homographies"].shape == (6, T, 3, 3)


def test_scenario_arrays_layout_mismatch(tiny_dataset, tiny_config):
    _, _, scenarios = tiny_dataset
    bad = dataclasses.replace(tiny_config, n_past=7)
    with pytest.raises(ConfigError):
        scenario_arrays(scenarios[:2], bad)


def test_scenario_arrays_observed_only_tiles_future(tiny_dataset, tiny_config):
    _, _, scenarios = tiny_dataset
    np_ = tiny_config.n_past
    full = scenario_arrays(scenarios[:2], tiny_config)
    obs = scenario_arrays(scenarios[:2], tiny_config, observed_only=True)
    npt.assert_array_equal(obs["homographies"][:, :np_], full["homographies"][:, :np_])
    for t in range(np_, tiny_config.n_past + tiny_config.n_future):
        npt.assert_array_equal(obs["homographies"][:, t], obs["homographies"][:, np_ - 1])
        npt.assert_array_equal(obs["semantics"][:, t], obs["semantics"][:, np_ - 1])


# ---------------------------------------------------------------------------
# training


def test_training_smoke_loss_decreases(tiny_config, tmp_path):
    # epoch means over few batches are noisy (the noising step is drawn per
    # batch), so this uses a couple hundred sequences like the train example
    from handtraj.synthbench import GenConfig, generate_dataset
    path = tmp_path / "train200.jsonl"
    generate_dataset(GenConfig(counts=(200, 0, 0), seed=21), path)
    cfg = dataclasses.replace(tiny_config, epochs=3)
    csv_path = tmp_path / "curve.csv"
    result = train(path, cfg, csv_path=csv_path)
    assert len(result.history) == 3
    assert result.steps == 3 * ((200 + cfg.batch_size - 1) // cfg.batch_size)
    first, last = result.history[0], result.history[-1]
    assert np.isfinite(last["total"])
    assert last["total"] < first["total"]

    text = csv_path.read_text().splitlines()
    assert text[0] == "epoch,step,vlb,dis,reg,angle,length,total"
    assert len(text) == 1 + result.steps


def test_training_is_deterministic(tiny_dataset, tiny_config):
    _, _, scenarios = tiny_dataset
    train_scn = [s for s in scenarios if s.split == "train"]
    r1 = train(train_scn, tiny_config)
    r2 = train(train_scn, tiny_config)
    assert r1.history == r2.history  # bit-identical loss curves
    for k, v in r1.checkpoint.params.items():
        npt.assert_array_equal(v, r2.checkpoint.params[k])


def test_training_seed_changes_result(tiny_dataset, tiny_config):
    _, _, scenarios = tiny_dataset
    train_scn = [s for s in scenarios if s.split == "train"][:8]
    r1 = train(train_scn, tiny_config, seed=1)
    r2 = train(train_scn, tiny_config, seed=2)
    assert r1.history != r2.history


def test_training_resume_continues_step_counter(tiny_dataset, tiny_config):
    _, _, scenarios = tiny_dataset
    train_scn = [s for s in scenarios if s.split == "train"][:8]
    one = dataclasses.replace(tiny_config, epochs=1)
    r1 = train(train_scn, one, seed=5)
    r2 = train(train_scn, one, seed=5, resume=r1.checkpoint)
    assert r2.steps == 2 * r1.steps
    assert r2.checkpoint.train_step == r2.steps
    assert r2.checkpoint.opt_t == 2 * r1.checkpoint.opt_t


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # NaNs propagate by design
def test_training_aborts_on_nonfinite(tiny_dataset, tiny_config):
    _, _, scenarios = tiny_dataset
    train_scn = [s for s in scenarios if s.split == "train"][:8]
    one = dataclasses.replace(tiny_config, epochs=1)
    r = train(train_scn, one)
    poisoned = dataclasses.replace(r.checkpoint)
    poisoned.params = dict(r.checkpoint.params)
    poisoned.params["enc.w1"] = np.full_like(poisoned.params["enc.w1"], np.nan)
    with pytest.raises(NonFiniteError, match="vlb|dis|reg|angle|length|total"):
        train(train_scn, one, resume=poisoned)


def test_training_rejects_empty_dataset(tiny_config):
    with pytest.raises(ValueError):
        train([], tiny_config)


def test_reference_config_one_training_step(tiny_dataset):
    # full-size shape audit: 6 blocks, d_state 16, S=1000 — a single batch
    _, _, scenarios = tiny_dataset
    cfg = dataclasses.replace(reference_config(), epochs=1, batch_size=2,
                              recon_every=1)
    assert (cfg.n_blocks, cfg.d_state, cfg.s_total) == (6, 16, 1000)
    result = train([s for s in scenarios if s.split == "train"][:2], cfg)
    assert result.steps == 1
    assert np.isfinite(result.history[0]["total"])


# ---------------------------------------------------------------------------
# prediction


def trained_tiny(tiny_dataset, tiny_config, epochs=1, n=8):
    _, _, scenarios = tiny_dataset
    train_scn = [s for s in scenarios if s.split == "train"][:n]
    cfg = dataclasses.replace(tiny_config, epochs=epochs)
    return train(train_scn, cfg), scenarios


def test_predict_shapes_and_determinism(tiny_dataset, tiny_config):
    result, scenarios = trained_tiny(tiny_dataset, tiny_config)
    model = result.model
    cfg = model.config
    test_scn = [s for s in scenarios if s.split == "test"][:3]
    arrs = scenario_arrays(test_scn, cfg)
    np_ = cfg.n_past
    args = (arrs["waypoints"][:, :np_], arrs["homographies"][:, :np_],
            arrs["semantics"][:, :np_])
    p1 = predict(model, *args, n_samples=3, seed=11)
    p2 = predict(model, *args, n_samples=3, seed=11)
    npt.assert_array_equal(p1, p2)
    assert p1.shape == (3, 3, cfg.n_future, 2)
    assert p1.min() >= 0.0 and p1.max() <= 1.0

    p3 = predict(model, *args, n_samples=3, seed=12)
    assert np.abs(p1 - p3).max() > 0

    # samples within one call are distinct draws
    assert any(np.abs(p1[0] - p1[j]).max() > 0 for j in range(1, 3))


def test_predict_unbatched_input_squeezes(tiny_dataset, tiny_config):
    result, scenarios = trained_tiny(tiny_dataset, tiny_config)
    model = result.model
    cfg = model.config
    scn = [s for s in scenarios if s.split == "test"][0]
    arrs = scenario_arrays([scn], cfg)
    np_ = cfg.n_past
    out = predict(model, arrs["waypoints"][0, :np_], arrs["homographies"][0, :np_],
                  arrs["semantics"][0, :np_], n_samples=2, seed=0)
    assert out.shape == (2, cfg.n_future, 2)


def test_predict_rejects_wrong_past_length(tiny_dataset, tiny_config):
    result, scenarios = trained_tiny(tiny_dataset, tiny_config)
    model = result.model
    cfg = model.config
    scn = [s for s in scenarios if s.split == "test"][0]
    arrs = scenario_arrays([scn], cfg)
    with pytest.raises(ConfigError, match="past"):
        predict(model, arrs["waypoints"][:, :4], arrs["homographies"][:, :4],
                arrs["semantics"][:, :4], n_samples=1)


# ---------------------------------------------------------------------------
# evaluation


def test_evaluate_model_report(tiny_dataset, tiny_config):
    result, scenarios = trained_tiny(tiny_dataset, tiny_config)
    test_scn = [s for s in scenarios if s.split == "test"][:6]
    rep = evaluate_model(result.model, test_scn, n_samples=2, seed=0)
    assert rep.aggregate["count"] == 6
    for key in ("ade", "fde", "wde", "sim", "auc_judd", "nss"):
        assert np.isfinite(rep.aggregate[key])
    assert rep.n_samples == 2
    assert all("archetype" in r and "egomotion_heavy" in r for r in rep.per_sequence)
    # aggregate is the mean of the per-sequence rows
    npt.assert_allclose(rep.aggregate["ade"],
                        np.mean([r["ade"] for r in rep.per_sequence]), rtol=1e-12)


@pytest.mark.filterwarnings("ignore::UserWarning")  # 2 scenarios: archetypes missing
def test_evaluate_model_with_estimated_homographies(tiny_dataset, tiny_config):
    result, scenarios = trained_tiny(tiny_dataset, tiny_config)
    test_scn = [s for s in scenarios if s.split == "test"][:2]
    rep = evaluate_model(result.model, test_scn, n_samples=1, seed=0,
                         use_estimated_homographies=True)
    assert np.isfinite(rep.aggregate["ade"])


def test_evaluate_cvh(tiny_dataset, tiny_config):
    _, _, scenarios = tiny_dataset
    test_scn = [s for s in scenarios if s.split == "test"]
    rep = evaluate_cvh(test_scn, n_past=tiny_config.n_past)
    assert rep.aggregate["count"] == len(test_scn)
    assert rep.aggregate["ade"] > 0
    assert rep.n_samples == 1


# ---------------------------------------------------------------------------
# checkpoint persistence


def test_checkpoint_round_trip_bit_identical(tiny_dataset, tiny_config, tmp_path):
    result, scenarios = trained_tiny(tiny_dataset, tiny_config)
    path = tmp_path / "model.bin"
    save_checkpoint(result.checkpoint, path)
    back = load_checkpoint(path)

    assert back.config == result.checkpoint.config
    assert back.opt_t == result.checkpoint.opt_t
    assert back.train_step == result.checkpoint.train_step
    assert set(back.params) == set(result.checkpoint.params)
    for k, v in result.checkpoint.params.items():
        npt.assert_array_equal(back.params[k], v)
    for k, v in result.checkpoint.opt_state.items():
        npt.assert_array_equal(back.opt_state[k], v)

    # a reloaded model predicts identically
    model2 = Model.from_checkpoint(back)
    cfg = result.model.config
    scn = [s for s in scenarios if s.split == "test"][0]
    arrs = scenario_arrays([scn], cfg)
    np_ = cfg.n_past
    args = (arrs["waypoints"][:, :np_], arrs["homographies"][:, :np_],
            arrs["semantics"][:, :np_])
    npt.assert_array_equal(predict(result.model, *args, n_samples=2, seed=4),
                           predict(model2, *args, n_samples=2, seed=4))


def test_checkpoint_save_is_reproducible(tiny_dataset, tiny_config, tmp_path):
    result, _ = trained_tiny(tiny_dataset, tiny_config)
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_checkpoint(result.checkpoint, p1)
    save_checkpoint(result.checkpoint, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_corruption_errors(tiny_dataset, tiny_config, tmp_path):
    result, _ = trained_tiny(tiny_dataset, tiny_config)
    path = tmp_path / "model.bin"
    save_checkpoint(result.checkpoint, path)
    raw = path.read_bytes()

    bad_magic = tmp_path / "magic.bin"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad_magic)

    truncated = tmp_path / "trunc.bin"
    truncated.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(truncated)

    import struct as _struct
    newer = tmp_path / "newer.bin"
    newer.write_bytes(raw[:4] + _struct.pack("<I", 99) + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(newer)

    trailing = tmp_path / "trail.bin"
    trailing.write_bytes(raw + b"\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(trailing)


# ---------------------------------------------------------------------------
# structural variants (ablation axes)


VARIANT_OVERRIDES = [
    {"motion_mode": "none"},
    {"motion_mode": "fused-input"},
    {"motion_mode": "sum"},
    {"scan_mode": "bidirectional"},
    {"n_blocks": 0},
    {"cdc": False},
    {"future_semantics": "zeros"},
]


@pytest.mark.filterwarnings("ignore::UserWarning")  # 2 scenarios: archetypes missing
@pytest.mark.parametrize("overrides", VARIANT_OVERRIDES,
                         ids=lambda o: "-".join(f"{k}={v}" for k, v in o.items()))
def test_variants_train_and_infer(tiny_dataset, tiny_config, overrides):
    _, _, scenarios = tiny_dataset
    train_scn = [s for s in scenarios if s.split == "train"][:8]
    cfg = dataclasses.replace(tiny_config, epochs=1, **overrides)
    result = train(train_scn, cfg, seed=7)
    assert np.isfinite(result.history[-1]["total"])
    test_scn = [s for s in scenarios if s.split == "test"][:2]
    rep = evaluate_model(result.model, test_scn, n_samples=1, seed=0)
    assert np.isfinite(rep.aggregate["ade"])
