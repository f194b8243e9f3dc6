import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nsreg.detectors import (HeadVariant, ScoringHead, ad_loss_bce, ad_loss_bce_tape, ad_loss_deviation,
                             ad_loss_deviation_tape, ad_loss_hypersphere, ad_loss_hypersphere_tape, compose,
                             deviation_prior, score)
from nsreg.encoder import EncoderParams
from nsreg.graph import AttributedGraph
from nsreg.numeric import DimensionError, NumericError, Tape


def test_bce_loss_hand_value():
    assert ad_loss_bce([0.9, 0.2], [1, 0]) == pytest.approx(-(np.log(0.9) + np.log(0.8)) / 2)
    with pytest.raises(ValueError):
        ad_loss_bce([], [])


def test_deviation_loss_hand_value():
    # normal at mu costs 0; anomaly at mu + 2 sigma costs margin - 2
    assert ad_loss_deviation([1.0, 5.0], [0, 1], (1.0, 2.0), margin=5.0) == pytest.approx((0.0 + 3.0) / 2)
    assert ad_loss_deviation([20.0], [1], (0.0, 1.0)) == 0.0


def test_deviation_prior_is_standard_normal_ish():
    mu, sigma = deviation_prior(np.random.default_rng(0), 5000)
    assert abs(mu) < 0.06 and abs(sigma - 1.0) < 0.05
    with pytest.raises(ValueError):
        deviation_prior(np.random.default_rng(0), 10)


def test_zero_spread_prior_is_numeric_error():
    with pytest.raises(NumericError):
        ad_loss_deviation([1.0], [0], np.zeros(5000))


def test_hypersphere_loss_hand_value():
    c = np.zeros(2)
    val = ad_loss_hypersphere([[1.0, 0.0], [0.0, 2.0]], [[3.0, 4.0]], c, eta_weight=2.0, eps=0.0)
    assert val == pytest.approx((1.0 + 4.0) / 2 + 2.0 / 25.0)
    # no anomalies: the repulsive term vanishes
    assert ad_loss_hypersphere([[1.0, 1.0]], np.zeros((0, 2)), c) == pytest.approx(2.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 6))
def test_tape_losses_match_plain(seed, n, n_anom):
    rng = np.random.default_rng(seed)
    y = np.r_[np.zeros(n), np.ones(n_anom)]
    s = rng.random(n + n_anom)
    t = Tape()
    assert ad_loss_bce_tape(t, t.const(s.reshape(-1, 1)), y).item() == pytest.approx(ad_loss_bce(s, y), abs=1e-12)
    raw = rng.normal(size=n + n_anom) * 4
    prior = (0.1, 0.9)
    assert (ad_loss_deviation_tape(t, t.const(raw.reshape(-1, 1)), y, prior).item()
            == pytest.approx(ad_loss_deviation(raw, y, prior), abs=1e-12))
    z = rng.normal(size=(n + n_anom, 3))
    c = rng.normal(size=3)
    assert (ad_loss_hypersphere_tape(t, t.const(z), y, c, 0.5).item()
            == pytest.approx(ad_loss_hypersphere(z[:n], z[n:], c, 0.5), rel=1e-12))


def test_scores_orientation():
    rng = np.random.default_rng(0)
    head = ScoringHead.init("bce", 4, rng)
    s = score(rng.normal(size=(10, 4)) * 10, head)
    assert s.shape == (10,) and np.all((s >= 0) & (s <= 1))
    sphere = ScoringHead.init("hypersphere", 2, rng)
    sphere.centre = np.array([1.0, 1.0])
    assert np.allclose(score(np.array([[1.0, 1.0], [4.0, 5.0]]), sphere), [0.0, 25.0])
    with pytest.raises(DimensionError):
        score(np.zeros((1, 3)), head)
    with pytest.raises(ValueError):
        ScoringHead.init("svm", 4, rng)


def test_compose_checks_widths():
    rng = np.random.default_rng(0)
    enc = EncoderParams.init(3, rng, hidden=8)
    with pytest.raises(DimensionError, match="8.*6"):
        compose(enc, ScoringHead.init("bce", 6, rng), True)
    det = compose(enc, ScoringHead.init(HeadVariant.DEVIATION, 8, rng), False)
    names = [g.name for g in det.groups()]
    assert len(names) == len(set(names))
    assert any(n.startswith("nsr.") for n in names)


def test_full_neighbourhood_scores_ignore_chunking_and_seed():
    rng = np.random.default_rng(1)
    n = 30
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < 0.2
    g = AttributedGraph.from_edges(n, np.stack([iu[keep], ju[keep]], 1), rng.normal(size=(n, 3)), np.zeros(n))
    det = compose(EncoderParams.init(3, rng, hidden=8), ScoringHead.init("bce", 8, rng), True)
    nodes = np.arange(n)
    a = det.score_nodes(g, nodes, seed=0)
    b = np.concatenate([det.score_nodes(g, nodes[:7], seed=5), det.score_nodes(g, nodes[7:], seed=9)])
    assert np.array_equal(a, b)
    assert np.array_equal(det.embed(g, nodes, chunk=4), det.embed(g, nodes))
