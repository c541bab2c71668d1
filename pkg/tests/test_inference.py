from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import _oracles
from fedfew import inference as inf
from fedfew import losses, nn
from fedfew.data import ClassLayout
from fedfew.inference import Prototype, UcDetector

# -- prototypes ----------------------------------------------------------------------


def test_prototype_of_single_vector_is_itself():
    p = inf.compute_prototypes([[1.5, -2.0]], [[0.0, 1.0]], 5)
    assert p.mu_pos.tolist() == [1.5, -2.0] and p.mu_neg.tolist() == [0.0, 1.0]
    assert (p.n_pos, p.n_neg, p.class_id) == (1, 1, 5)


def test_prototype_symmetric_pair():
    p = inf.compute_prototypes([[0.0, 0.0], [2.0, 2.0]], [[1.0, 1.0]], 5)
    assert p.mu_pos.tolist() == [1.0, 1.0]


def test_prototype_brute_force_mean():
    rng = np.random.default_rng(0)
    pos, neg = rng.standard_normal((100, 7)), rng.standard_normal((40, 7))
    p = inf.compute_prototypes(pos, neg, 6)
    want = [sum(row[j] for row in pos) / 100 for j in range(7)]
    np.testing.assert_allclose(p.mu_pos, want, rtol=0, atol=1e-12)
    assert (p.n_pos, p.n_neg) == (100, 40)


def test_prototype_empty_rejected():
    with pytest.raises(ValueError):
        inf.compute_prototypes(np.zeros((0, 3)), np.ones((2, 3)), 5)
    with pytest.raises(ValueError):
        Prototype(5, np.zeros(2), np.array([np.nan, 0.0]), 1, 1)


# -- threshold -------------------------------------------------------------------------


def _stats(no_uc, uc):
    return [(e, False) for e in no_uc] + [(e, True) for e in uc]


def test_threshold_hand_example():
    stats = _stats([-30, -28, -26], [-20, -18])
    thr = inf.select_threshold(stats)
    assert thr == -23.0
    assert inf.threshold_accuracy(stats, thr) == 5
    assert _oracles.sweep_threshold(stats) == (5, -23.0)


def test_threshold_separable_full_accuracy():
    rng = np.random.default_rng(1)
    for _ in range(50):
        lo = rng.uniform(-40, -20, 10)
        hi = rng.uniform(-19, 0, 5)
        stats = _stats(lo, hi)
        assert inf.threshold_accuracy(stats, inf.select_threshold(stats)) == 15


def test_threshold_interleaved_matches_sweep():
    stats = _stats([-10, -8, -6, -4], [-9, -7, -5, -3])
    best, chosen = _oracles.sweep_threshold(stats)
    thr = inf.select_threshold(stats)
    assert inf.threshold_accuracy(stats, thr) == best
    assert thr == chosen


def test_threshold_random_fixtures_match_sweep():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        # coarse integer grid forces duplicate energies and accuracy ties
        e = rng.integers(-8, 8, n).astype(float)
        f = rng.random(n) < 0.4
        f[0], f[1] = True, False
        stats = list(zip(e.tolist(), f.tolist()))
        best, chosen = _oracles.sweep_threshold(stats)
        thr = inf.select_threshold(stats)
        assert inf.threshold_accuracy(stats, thr) == best
        assert thr == chosen, stats


def test_threshold_needs_both_flags():
    with pytest.raises(ValueError):
        inf.select_threshold(_stats([-3, -2], []))
    with pytest.raises(ValueError):
        inf.select_threshold(_stats([], [-3, -2]))


def test_threshold_can_be_infinite_when_all_flags_hide_below():
    # every UC example sits at the lowest energy: the best cut keeps all non-UC right
    stats = _stats([-1, 0], [-5])
    thr = inf.select_threshold(stats)
    assert inf.threshold_accuracy(stats, thr) == _oracles.sweep_threshold(stats)[0]


# -- detect ------------------------------------------------------------------------------


@pytest.mark.parametrize("energy,want", [(-23.0, False), (-30.0, False), (-18.0, True)])
def test_detect_uc_examples(energy, want):
    assert bool(inf.detect_uc(energy, -23.0)) is want


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50), st.floats(0, 10), st.floats(-50, 50))
def test_detect_uc_monotone(energy, bump, thr):
    if inf.detect_uc(energy, thr):
        assert inf.detect_uc(energy + bump, thr)


# -- distances ------------------------------------------------------------------------------


def test_identity_distances():
    u = np.array([0.3, -1.2, 2.0, 0.5])
    assert inf.distance(u, u, "cosine") == 0.0
    assert inf.distance(u, u, "euclidean") == 0.0
    assert 0.0 <= inf.distance(u, u, "emd_sinkhorn") <= inf.SINKHORN_EPS


def test_cosine_hand_value():
    assert inf.distance([1, 0], [1, 1], "cosine") == pytest.approx(1 - 1 / np.sqrt(2), abs=1e-15)
    assert inf.distance([1, 0], [1, 1], "cosine") == pytest.approx(0.292893, abs=1e-6)


def test_emd_orthogonal_unit_vectors():
    cost = inf.index_cost(2)
    assert _oracles.exact_transport_cost(np.array([1.0, 0]), np.array([0, 1.0]), cost) == pytest.approx(1.0)
    assert inf.distance([1, 0], [0, 1], "emd_sinkhorn") == pytest.approx(1.0, abs=0.1)


@pytest.mark.parametrize("d", [2, 3, 4])
def test_sinkhorn_close_to_exact_transport(d):
    masses = _oracles.mass_fixtures(d)
    cost = inf.index_cost(d)
    worst = 0.0
    for a, b in itertools.product(masses, repeat=2):
        exact = _oracles.exact_transport_cost(a, b, cost)
        worst = max(worst, abs(inf.sinkhorn_cost(a, b, cost) - exact))
    assert worst < 0.1


def test_index_cost_layout():
    assert inf.index_cost(3).tolist() == [[0, 0.5, 1], [0.5, 0, 0.5], [1, 0.5, 0]]


@pytest.mark.parametrize("metric", inf.METRICS)
def test_distance_symmetric(metric):
    rng = np.random.default_rng(3)
    for _ in range(50):
        u, v = rng.standard_normal((2, 6))
        assert inf.distance(u, v, metric) == inf.distance(v, u, metric)
        assert inf.distance(u, v, metric) >= 0


def test_distance_errors():
    with pytest.raises(inf.DistanceError):
        inf.distance([0, 0], [1, 0], "cosine")
    with pytest.raises(inf.DistanceError):
        inf.distance([0, 0], [1, 0], "emd_sinkhorn")
    with pytest.raises(inf.DistanceError):
        inf.distance([1], [1], "emd_sinkhorn")
    with pytest.raises(inf.DistanceError):
        inf.distance([1, 2], [1, 2, 3])
    with pytest.raises(inf.DistanceError):
        inf.distance([1, 2], [1, 2], "manhattan")


# -- matching ---------------------------------------------------------------------------------


def _proto(pos, neg, c=5):
    return Prototype(c, np.asarray(pos, float), np.asarray(neg, float), 10, 90)


@pytest.mark.parametrize("metric", inf.METRICS)
def test_match_at_positive_prototype(metric):
    assert inf.match_prototypes([1.0, 0.2], [_proto([1.0, 0.2], [0.1, 1.0])], metric)


def test_equidistant_pair_votes_positive():
    assert inf.match_prototypes([0.0, 1.0], [_proto([1.0, 1.0], [-1.0, 1.0])], "euclidean")


def test_majority_of_three():
    z = [1.0, 0.0]
    pos, neg = _proto([1, 0], [0, 1]), _proto([0, 1], [1, 0])
    assert inf.match_prototypes(z, [pos, pos, neg], "cosine")
    assert not inf.match_prototypes(z, [pos, neg, neg], "cosine")


def test_even_split_votes_positive():
    z = [1.0, 0.0]
    assert inf.match_prototypes(z, [_proto([1, 0], [0, 1]), _proto([0, 1], [1, 0])], "cosine")


def test_match_requires_prototypes():
    with pytest.raises(ValueError):
        inf.match_prototypes([1.0], [], "cosine")


def test_cosine_votes_scale_invariant():
    rng = np.random.default_rng(4)
    protos = [_proto(*rng.standard_normal((2, 5))) for _ in range(3)]
    for _ in range(100):
        z = rng.standard_normal(5)
        base = inf.match_prototypes(z, protos, "cosine")
        for s in (1e-3, 0.5, 7.0, 1e4):
            assert inf.match_prototypes(s * z, protos, "cosine") == base


# -- detector and full prediction ---------------------------------------------------------------

LAYOUT = ClassLayout(n_classes=4, uc_classes=(2, 3))


def _hand_detector():
    return UcDetector(-2.0, "euclidean", (_proto([1, 0], [0, 1], 2), _proto([0, 1], [1, 0], 3)))


def test_predict_hand_trace():
    # two common classes plus the indicator; tau 1
    logits = np.array([
        [5.0, 5.0, -5.0],     # energy ~ -10: below gate, CC class 0 only
        [0.0, 0.0, 0.0],      # energy -3 ln 2 = -2.079: below gate
        [-9.0, 3.0, -9.0],    # energy ~ -3.05: below gate
        [-20.0, -20.0, 0.2],  # energy ~ -0.80: gate open
        [-20.0, 0.1, -20.0],  # energy ~ -0.74: gate open
    ])
    feats = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.9, 0.1], [0.2, 0.8]])
    e = losses.joint_energy(logits).value
    assert list(e > -2.0) == [False, False, False, True, True]
    want = np.array([
        [1, 0, 0, 0],
        [0, 0, 0, 0],
        [1, 0, 0, 0],
        [0, 1, 1, 0],
        [1, 0, 0, 1],
    ])
    got = inf.assemble_predictions(logits, feats, _hand_detector(), LAYOUT)
    assert got.tolist() == want.tolist()


def test_gate_closed_zeroes_uc_columns():
    logits = np.full((3, 3), 6.0)
    feats = np.array([[1.0, 0.0]] * 3)
    out = inf.assemble_predictions(logits, feats, _hand_detector(), LAYOUT)
    assert not out[:, [2, 3]].any()
    assert out.shape == (3, 4)


def test_always_false_detector_equals_cc_only():
    rng = np.random.default_rng(5)
    spec = nn.ModelSpec(input_dim=6, hidden_dims=(8,), feature_dim=2, head_out_dim=3)
    params = nn.init_params(spec, 0)
    x = rng.standard_normal((50, 6))
    never = UcDetector(np.inf, "cosine", _hand_detector().prototypes)
    a = inf.predict_full(x, params, spec, never, LAYOUT)
    b = inf.predict_full(x, params, spec, None, LAYOUT)
    assert np.array_equal(a, b) and not b[:, [2, 3]].any()
    probs = 1 / (1 + np.exp(-nn.classify_logits(params, spec, x)[:, 1:]))
    assert np.array_equal(b[:, [0, 1]], (probs > 0.5).astype(np.int8))


def test_detector_text_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    det = UcDetector(-11.123456789012345, "emd_sinkhorn",
                     tuple(Prototype(c, rng.standard_normal(4), rng.standard_normal(4), 10, 90) for c in (5, 6)))
    path = tmp_path / "det.txt"
    inf.save_detector(det, path)
    back = inf.load_detector(path)
    assert back.threshold == det.threshold and back.metric == det.metric
    for p, q in zip(det.prototypes, back.prototypes):
        assert p.mu_pos.tobytes() == q.mu_pos.tobytes() and p.mu_neg.tobytes() == q.mu_neg.tobytes()
        assert (p.class_id, p.n_pos, p.n_neg) == (q.class_id, q.n_pos, q.n_neg)
    assert back.classes() == [5, 6]


def test_detector_parse_errors():
    with pytest.raises(ValueError):
        inf.loads_detector("threshold x\n")
    with pytest.raises(ValueError):
        inf.loads_detector("threshold 1\nmetric cosine\nprototypes 1\nprototype 5 1 1 3\npos 1 2\nneg 1 2\n")
    with pytest.raises(ValueError):
        UcDetector(np.nan, "cosine")
    with pytest.raises(ValueError):
        UcDetector(0.0, "hamming")
