import numpy as np
import pytest

from nsreg.evaluation import SplitConfig, make_rotations
from nsreg.graph import ConfigError, SynthConfig, generate_synthetic
from nsreg.trainer import (CheckpointError, TrainConfig, build_batch, checkpoint_bytes, init_state,
                           load_checkpoint, objective, save_checkpoint, steps_per_epoch, train)
from nsreg.numeric import Tape

SMALL = SynthConfig(n_normal=240, n_anomaly_per_class=30, feature_dim=12, shift_dims=3, p_nn=0.08, p_na=0.002,
                    normal_groups=3)


@pytest.fixture(scope="module")
def data():
    g = generate_synthetic(SMALL, 0)
    split = make_rotations(g, SplitConfig(n_labelled_anomalies=10, labelled_normal_fraction=0.2, seed=0))[0]
    return g, split


def cfg(**kw):
    base = dict(epochs=3, b_ad_normals=16, batch_relations=30, hidden=8, fanouts=(4, 3), learning_rate=5e-3)
    return TrainConfig(**{**base, **kw})


def test_config_validation():
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"epochs": 1, "learning_rte": 0.1})
    with pytest.raises(ConfigError):
        TrainConfig(head="svm")
    with pytest.raises(ConfigError):
        TrainConfig(alpha=1.5)
    c = TrainConfig.from_dict(TrainConfig(fanouts=[3, 2]).to_dict())
    assert c.fanouts == (3, 2)


def test_steps_per_epoch(data):
    _, split = data
    assert len(split.labelled_normals) == 48
    assert steps_per_epoch(split, cfg(b_ad_normals=16)) == 3
    assert steps_per_epoch(split, cfg(b_ad_normals=47)) == 2
    assert steps_per_epoch(split, cfg(b_ad_normals=512)) == 1


def test_training_runs_expected_iterations_and_lowers_loss(data):
    g, split = data
    state, hist = train(g, split, cfg(epochs=30))
    assert state.iteration == 90 == len(hist)
    first = np.mean([h.total for h in hist[:10]])
    last = np.mean([h.total for h in hist[-10:]])
    assert last < first


def test_nsr_disabled_leaves_relation_params_untouched(data):
    g, split = data
    state = init_state(g, split, cfg(nsr_enabled=False))
    before = {gr.name: gr.value.copy() for gr in state.detector.nsr.groups()}
    train(g, split, state.config, state)
    for gr in state.detector.nsr.groups():
        assert gr.step_count == 0 and np.array_equal(gr.value, before[gr.name])
    assert all(gr.step_count == state.iteration for gr in state.detector.encoder.groups())


def test_heads_that_need_anomalies(data):
    g, split = data
    import dataclasses
    no_anom = dataclasses.replace(split, labelled_anomalies=np.zeros(0, dtype=np.int64))
    with pytest.raises(ConfigError, match="labelled anomalies"):
        init_state(g, no_anom, cfg(head="bce"))
    state, hist = train(g, no_anom, cfg(head="hypersphere", nsr_enabled=False, epochs=1))
    assert len(hist) == 3 and np.isfinite(hist[-1].ad_loss)


def test_hypersphere_centre_is_untrained_normal_mean(data):
    g, split = data
    state = init_state(g, split, cfg(head="hypersphere"))
    assert np.allclose(state.detector.head.centre, state.detector.embed(g, split.labelled_normals).mean(axis=0))


def test_objective_weights_route_gradients(data):
    g, split = data
    state = init_state(g, split, cfg())
    batch = build_batch(g, split, state)
    det = state.detector
    t = Tape()
    total, ad, nsr = objective(t, g, batch, det, state.config, ad_weight=1.0, nsr_weight=0.0)
    t.backward(total)
    assert all(np.all(gr.grad == 0) for gr in det.nsr.groups())
    assert any(np.any(gr.grad != 0) for gr in det.head.groups())


def test_checkpoint_round_trip_and_resume(data, tmp_path):
    g, split = data
    c = cfg(epochs=4)
    full, _ = train(g, split, c)
    half, _ = train(g, split, c, stop_at=6)
    save_checkpoint(half, tmp_path / "half.ckpt")
    resumed, _ = train(g, split, c, load_checkpoint(tmp_path / "half.ckpt"))
    assert checkpoint_bytes(resumed) == checkpoint_bytes(full)
    again, _ = train(g, split, c)
    assert checkpoint_bytes(again) == checkpoint_bytes(full)


def test_corrupt_checkpoints_rejected(data, tmp_path):
    g, split = data
    state = init_state(g, split, cfg())
    raw = checkpoint_bytes(state)
    for bad, msg in [(raw[:-3], "truncated"), (b"XXXX" + raw[4:], "magic"), (raw + b"\0", "trailing"),
                     (raw[:4] + b"\x09\0\0\0" + raw[8:], "version")]:
        p = tmp_path / "bad.ckpt"
        p.write_bytes(bad)
        with pytest.raises(CheckpointError, match=msg):
            load_checkpoint(p)


def test_zero_epochs_gives_untrained_usable_state(data, tmp_path):
    g, split = data
    state, hist = train(g, split, cfg(epochs=0))
    assert hist == [] and state.iteration == 0
    save_checkpoint(state, tmp_path / "c")
    back = load_checkpoint(tmp_path / "c")
    assert np.array_equal(back.detector.score_nodes(g, split.test_all), state.detector.score_nodes(g, split.test_all))
