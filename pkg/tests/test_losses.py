from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import _oracles
from fedfew import autodiff as ad
from fedfew import losses
from fedfew.losses import EnergyConfig

LN2 = np.log(2.0)
CFG = EnergyConfig()


def val(v):
    return float(np.asarray(v.value).reshape(-1)[0]) if np.asarray(v.value).size == 1 else v.value


def test_defaults():
    assert (CFG.tau, CFG.lam, CFG.m_c, CFG.m_u) == (1.0, 0.01, -5.0, -25.0)


def test_config_validation():
    with pytest.raises(ValueError):
        EnergyConfig(tau=0.0)
    with pytest.raises(ValueError):
        EnergyConfig(lam=-0.1)


# -- partial BCE -------------------------------------------------------------------


def test_bce_zero_logits_five_ccs():
    y = np.array([0, 1, 0, 0, 1, 0], dtype=float)
    assert val(losses.bce_partial(np.zeros(6), y)) == pytest.approx(6 * LN2, abs=1e-12)
    assert 6 * LN2 == pytest.approx(4.158883, abs=1e-6)


def test_bce_saturation():
    y = np.array([1, 0], dtype=float)
    assert val(losses.bce_partial(np.array([40.0, -40.0]), y)) < 1e-10


def test_bce_indicator_confident():
    logits = np.array([40.0] + [-40.0] * 5)
    y = np.array([1.0] + [0.0] * 5)
    assert val(losses.bce_partial(logits, y)) < 1e-9


def test_bce_no_overflow_at_large_logits():
    y = np.array([0, 1, 1, 0], dtype=float)
    v = val(losses.bce_partial(np.array([50.0, -50.0, 50.0, -50.0]), y))
    assert np.isfinite(v) and v == pytest.approx(100.0, rel=1e-12)


@pytest.mark.parametrize("bad", [[1, 1, 0], [0, 0, 0], [0.5, 0, 1]])
def test_bce_rejects_invalid_encoding(bad):
    with pytest.raises(losses.LabelEncodingError):
        losses.bce_partial(np.zeros(3), np.array(bad, dtype=float))


def test_bce_permutation_equivariant_over_ccs():
    rng = np.random.default_rng(3)
    for _ in range(20):
        logits = rng.standard_normal(6)
        y = _oracles._random_cc_labels(rng, 1, 5)[0]
        perm = np.concatenate([[0], 1 + rng.permutation(5)])
        a = val(losses.bce_partial(logits, y))
        b = val(losses.bce_partial(logits[perm], y[perm]))
        assert a == pytest.approx(b, abs=1e-12)


# -- weighted BCE --------------------------------------------------------------------


def test_weighted_bce_balanced_is_half():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((5, 4))
    y = rng.integers(0, 2, (5, 4)).astype(float)
    plain = np.sum(np.logaddexp(0, logits) - logits * y, axis=1)
    got = losses.weighted_bce(logits, y, [7] * 4, [7] * 4).value
    np.testing.assert_allclose(got, 0.5 * plain, rtol=1e-12)


def test_weighted_bce_rare_positive():
    got = val(losses.weighted_bce(np.array([0.0]), np.array([1.0]), [1], [99]))
    assert got == pytest.approx(0.99 * LN2, abs=1e-12)
    # 0.99 ln 2 = 0.686216; the commonly quoted 0.686265 is a rounding slip
    assert got == pytest.approx(0.686265, abs=1e-4)


def test_weighted_bce_zero_count_clamped():
    v = val(losses.weighted_bce(np.array([0.3]), np.array([1.0]), [0], [0]))
    assert np.isfinite(v) and v == pytest.approx(0.5 * np.logaddexp(0, -0.3), rel=1e-12)


def test_weighted_bce_masks_unknown():
    logits = np.array([[5.0, -3.0]])
    full = val(losses.weighted_bce(logits, np.array([[1.0, -1.0]]), [3, 3], [3, 3]))
    only_first = val(losses.weighted_bce(logits[:, :1], np.array([[1.0]]), [3], [3]))
    assert full == pytest.approx(only_first, abs=1e-15)


# -- energies ------------------------------------------------------------------------


@pytest.mark.parametrize("logit,tau,want", [(0.0, 1.0, -LN2), (2.0, 1.0, -np.log1p(np.e**2)),
                                             (0.0, 2.0, -2 * LN2)])
def test_class_energy_cases(logit, tau, want):
    assert val(losses.class_energy(np.array([logit]), tau)) == pytest.approx(want, abs=1e-12)


def test_class_energy_reference_digits():
    assert val(losses.class_energy(np.array([2.0]))) == pytest.approx(-2.126928, abs=1e-6)
    assert val(losses.class_energy(np.array([0.0]), 2.0)) == pytest.approx(-1.386294, abs=1e-6)


def test_joint_energy_twelve_zero_logits():
    assert val(losses.joint_energy(np.zeros(12))) == pytest.approx(-12 * LN2, abs=1e-12)
    assert -12 * LN2 == pytest.approx(-8.317766, abs=1e-6)


def test_joint_energy_hand_case():
    got = val(losses.joint_energy(np.array([2.0, 0, 0, 0, 0, 0])))
    assert got == pytest.approx(-(np.log1p(np.e**2) + 5 * LN2), abs=1e-12)
    assert got == pytest.approx(-5.592664, abs=1e-6)


@settings(max_examples=200, deadline=None)
# strictness is only observable where softplus changes exceed float resolution
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=12), st.integers(0, 11), st.floats(0.1, 5.0))
def test_joint_energy_negative_and_monotone(logits, which, bump):
    logits = np.array(logits)
    which %= len(logits)
    e = val(losses.joint_energy(logits))
    assert e < 0
    up = logits.copy()
    up[which] += bump
    assert val(losses.joint_energy(up)) < e


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=11), st.floats(-10, 10))
def test_adding_class_dimension_decreases_energy(logits, extra):
    a = val(losses.joint_energy(np.array(logits)))
    b = val(losses.joint_energy(np.array(logits + [extra])))
    assert b < a


def test_joint_energy_batched_rows():
    rows = np.array([[0.0, 0.0], [2.0, 0.0]])
    np.testing.assert_allclose(losses.joint_energy(rows).value,
                               [-2 * LN2, -(np.log1p(np.e**2) + LN2)], rtol=1e-14)


# -- hinge regularizers --------------------------------------------------------------------


@pytest.mark.parametrize("energy,want", [(-6.0, 0.0), (-4.0, 0.01), (-5.0, 0.0)])
def test_hinge_cc_cases(energy, want):
    assert val(losses.hinge_cc(np.array(energy), CFG)) == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("energy,want", [(-20.0, 0.0), (-30.0, 0.25), (-25.0, 0.0)])
def test_hinge_uc_cases(energy, want):
    assert val(losses.hinge_uc(np.array(energy), CFG)) == pytest.approx(want, abs=1e-12)


def test_hinges_zero_one_side_strictly_monotone_other():
    below = np.linspace(-40, CFG.m_c, 50)
    above = np.linspace(CFG.m_c + 1e-3, 5, 50)
    assert not losses.hinge_cc(below, CFG).value.any()
    assert np.all(np.diff(losses.hinge_cc(above, CFG).value) > 0)
    high = np.linspace(CFG.m_u, 5, 50)
    low = np.linspace(-60, CFG.m_u - 1e-3, 50)
    assert not losses.hinge_uc(high, CFG).value.any()
    assert np.all(np.diff(losses.hinge_uc(low, CFG).value) < 0)
    assert np.all(losses.hinge_uc(low, CFG).value > 0)


def test_hinge_uc_kink_one_sided_differences():
    # zero logit puts the joint energy at -ln 2; use that as the margin
    logits = np.array([0.0])
    cfg = EnergyConfig(lam=1.0, m_u=-LN2)

    def build(tape, p):
        return ad.sum(losses.uc_loss(p["l"], cfg))

    left, right = ad.one_sided_differences(build, {"l": logits}, "l", 0, eps=1e-5)
    # squared hinge: flat on one side, first order zero on the other
    assert left == 0.0
    assert 0.0 < right < 1e-5
    tape = ad.Tape()
    leaf = tape.param(logits)
    assert ad.gradients(build(tape, {"l": leaf}), {"l": leaf})["l"].tolist() == [0.0]


# -- total --------------------------------------------------------------------------------


def test_total_equals_bce_when_lambda_zero():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((4, 6))
    y = _oracles._random_cc_labels(rng, 4, 5)
    cfg = EnergyConfig(lam=0.0)
    a = losses.total_cc_loss(logits, y, cfg).value
    b = losses.bce_partial(logits, y).value
    assert a.tobytes() == b.tobytes()


def test_total_zero_logits_hand_value():
    y = np.array([1.0, 0, 0, 0, 0, 0])
    got = val(losses.total_cc_loss(np.zeros(6), y, CFG))
    want = 6 * LN2 + 0.01 * (-6 * LN2 + 5.0) ** 2
    assert got == pytest.approx(want, abs=1e-12)
    assert got == pytest.approx(4.165958, abs=1e-6)


def test_total_grad_check_small_mlp():
    build, point = _oracles.small_mlp_total_loss_case()
    assert ad.grad_check(build, point, eps=1e-5) < 1e-4


@pytest.mark.parametrize("name", list(_oracles.gradient_cases()))
def test_loss_gradients_match_finite_differences(name):
    make = _oracles.gradient_cases()[name]
    rng = np.random.default_rng(17)
    for _ in range(25):
        build, point = make(rng)
        assert ad.grad_check(build, point, eps=1e-5) < 1e-4


# -- SimSiam ------------------------------------------------------------------------------


def test_simsiam_aligned_is_minus_one():
    p = np.array([[1.0, 2.0, -1.0]])
    assert val(losses.simsiam_loss(p, p, p, p)) == pytest.approx(-1.0, abs=1e-15)


def test_simsiam_orthogonal_is_zero():
    a, b = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    assert val(losses.simsiam_loss(a, b, a, b)) == pytest.approx(0.0, abs=1e-15)


def test_simsiam_scale_invariant():
    rng = np.random.default_rng(2)
    p1, z1, p2, z2 = rng.standard_normal((4, 3, 5))
    base = losses.simsiam_loss(p1, z1, p2, z2).value
    for args in ((10 * p1, z1, p2, z2), (p1, 0.1 * z1, p2, z2), (p1, z1, 3 * p2, 7 * z2)):
        np.testing.assert_allclose(losses.simsiam_loss(*args).value, base, rtol=1e-12)


def test_simsiam_range():
    rng = np.random.default_rng(5)
    v = losses.simsiam_loss(*rng.standard_normal((4, 50, 6))).value
    assert np.all(v >= -1 - 1e-12) and np.all(v <= 1 + 1e-12)


def test_simsiam_zero_norm_rejected():
    with pytest.raises(ValueError):
        losses.simsiam_loss(np.zeros((1, 3)), np.ones((1, 3)), np.ones((1, 3)), np.ones((1, 3)))


def test_batch_mean_averages():
    assert val(losses.batch_mean(ad.constant([1.0, 2.0, 6.0]))) == pytest.approx(3.0)
