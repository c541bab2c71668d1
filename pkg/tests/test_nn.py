from __future__ import annotations

import struct

import numpy as np
import pytest

from fedfew import autodiff as ad
from fedfew import losses, nn

SPEC = nn.ModelSpec()


def test_init_deterministic_in_seed():
    assert nn.init_params(SPEC, 7) == nn.init_params(SPEC, 7)
    assert nn.init_params(SPEC, 7) != nn.init_params(SPEC, 8)


def test_biases_zero_and_weights_within_glorot_limit():
    params = nn.init_params(SPEC, 0)
    for name, value in params.items():
        if name.endswith(".bias"):
            assert not value.any()
        else:
            fan_in, fan_out = value.shape
            assert np.abs(value).max() <= np.sqrt(6.0 / (fan_in + fan_out))


def test_weight_mean_near_zero():
    spec = nn.ModelSpec(input_dim=100, hidden_dims=(100,), feature_dim=100)
    w = nn.init_params(spec, 0)["trunk.0.weight"]
    assert w.size == 10_000
    assert abs(w.mean()) < 0.01


def test_invalid_dims_rejected():
    with pytest.raises(ValueError):
        nn.ModelSpec(feature_dim=0)


def _zero_params(spec):
    return nn.ParameterSet({k: np.zeros(s) for k, s in spec.layout()})


def test_zero_weights_give_zero_features():
    x = np.random.default_rng(0).standard_normal(SPEC.input_dim)
    assert not nn.extract_features(_zero_params(SPEC), SPEC, x).any()


def test_identity_trunk_hand_forward():
    spec = nn.ModelSpec(input_dim=2, hidden_dims=(), feature_dim=2, head_out_dim=1)
    params = _zero_params(spec).replace(**{"trunk.0.weight": np.eye(2)})
    assert nn.extract_features(params, spec, [1.0, -1.0]).tolist() == [1.0, 0.0]


def test_features_deterministic():
    params = nn.init_params(SPEC, 1)
    x = np.random.default_rng(2).standard_normal((5, SPEC.input_dim))
    assert nn.extract_features(params, SPEC, x).tobytes() == nn.extract_features(params, SPEC, x).tobytes()


def test_dim_mismatch_rejected():
    params = nn.init_params(SPEC, 1)
    with pytest.raises(ad.ShapeError):
        nn.extract_features(params, SPEC, np.zeros(SPEC.input_dim + 1))
    with pytest.raises(ad.ShapeError):
        nn.classify_logits(params, SPEC, np.zeros((3, 5)))


def test_zero_head_gives_half_probabilities():
    params = nn.init_params(SPEC, 3).replace(**{"head.weight": np.zeros((SPEC.feature_dim, SPEC.head_out_dim))})
    logits = nn.classify_logits(params, SPEC, np.ones(SPEC.input_dim))
    assert not logits.any()
    assert np.all(1.0 / (1.0 + np.exp(-logits)) == 0.5)


def test_hand_head_forward():
    spec = nn.ModelSpec(input_dim=1, hidden_dims=(), feature_dim=1, head_out_dim=1)
    params = _zero_params(spec).replace(**{"trunk.0.weight": np.array([[1.0]]),
                                           "head.weight": np.array([[2.0]])})
    assert nn.classify_logits(params, spec, [3.0]).tolist() == [6.0]


@pytest.mark.parametrize("n_cc", [1, 5, 11])
def test_logit_length_is_cc_plus_one(n_cc):
    spec = nn.ModelSpec(head_out_dim=n_cc + 1)
    assert nn.classify_logits(nn.init_params(spec, 0), spec, np.zeros(32)).shape == (n_cc + 1,)


def test_logits_pure_over_repeated_calls():
    params = nn.init_params(SPEC, 4)
    x = np.random.default_rng(5).standard_normal(SPEC.input_dim)
    first = nn.classify_logits(params, SPEC, x).tobytes()
    assert all(nn.classify_logits(params, SPEC, x).tobytes() == first for _ in range(1000))


def test_simsiam_identical_views_and_shapes():
    params = nn.init_params(SPEC, 0)
    v = np.random.default_rng(0).standard_normal((4, SPEC.input_dim))
    p1, z1, p2, z2 = nn.simsiam_forward(params, SPEC, v, v)
    assert np.array_equal(z1, z2) and np.array_equal(p1, p2)
    assert p1.shape == z1.shape == (4, SPEC.simsiam_proj_dim)


def _simsiam_grads(params, v1, v2, stop_gradient=True):
    tape = ad.Tape()
    p = nn.leaves(tape, params)
    out = nn.simsiam_branches(p, SPEC, tape.constant(v1), tape.constant(v2))
    loss = losses.batch_mean(losses.simsiam_loss(*out, stop_gradient=stop_gradient))
    return ad.gradients(loss, p)


def test_projector_gradient_only_through_predictor_branch():
    params = nn.init_params(SPEC, 0)
    rng = np.random.default_rng(1)
    v1, v2 = rng.standard_normal((2, 6, SPEC.input_dim))
    got = _simsiam_grads(params, v1, v2)
    # oracle: targets frozen as precomputed constants, so only p-branch edges remain
    _, z1c, _, z2c = nn.simsiam_forward(params, SPEC, v1, v2)
    tape = ad.Tape()
    p = nn.leaves(tape, params)
    q1, _, q2, _ = nn.simsiam_branches(p, SPEC, tape.constant(v1), tape.constant(v2))
    loss = losses.batch_mean(losses.simsiam_loss(q1, tape.constant(z1c), q2, tape.constant(z2c)))
    want = ad.gradients(loss, p)
    for k in got:
        np.testing.assert_allclose(got[k], want[k], rtol=1e-12, atol=1e-14)
    without = _simsiam_grads(params, v1, v2, stop_gradient=False)
    assert any(not np.allclose(without[k], got[k]) for k in got)


def test_loss_gradient_wrt_z_is_zero_with_stop_gradient():
    rng = np.random.default_rng(2)
    tape = ad.Tape()
    p1, z1, p2, z2 = (tape.param(rng.standard_normal((3, 8))) for _ in range(4))
    g = ad.gradients(losses.batch_mean(losses.simsiam_loss(p1, z1, p2, z2)), {"z1": z1, "z2": z2})
    assert not g["z1"].any() and not g["z2"].any()
    tape = ad.Tape()
    p1, z1, p2, z2 = (tape.param(rng.standard_normal((3, 8))) for _ in range(4))
    g = ad.gradients(losses.batch_mean(losses.simsiam_loss(p1, z1, p2, z2, stop_gradient=False)),
                     {"z1": z1})
    assert g["z1"].any()


def test_checkpoint_roundtrip(tmp_path):
    params = nn.init_params(SPEC, 11)
    path = tmp_path / "p.ckpt"
    nn.save_checkpoint(params, path)
    back = nn.load_checkpoint(path, SPEC)
    assert back == params
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()


def test_checkpoint_layout_on_disk():
    params = nn.ParameterSet({"a": np.array([[1.5, -2.0]])})
    blob = nn.encode_checkpoint(params)
    want = (b"FEDFEW1" + struct.pack("<I", 1) + struct.pack("<I", 1) + b"a"
            + struct.pack("<I", 2) + struct.pack("<2Q", 1, 2) + struct.pack("<2d", 1.5, -2.0))
    assert blob == want


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "p.ckpt"
    nn.save_checkpoint(nn.init_params(SPEC, 0), path)
    blob = bytearray(path.read_bytes())
    blob[0:1] = b"X"
    path.write_bytes(bytes(blob))
    with pytest.raises(nn.BadMagicError):
        nn.load_checkpoint(path)


@pytest.mark.parametrize("delta", [-1, -100, 5])
def test_checkpoint_length_mismatch(tmp_path, delta):
    blob = nn.encode_checkpoint(nn.init_params(SPEC, 0))
    blob = blob[:delta] if delta < 0 else blob + b"\0" * delta
    with pytest.raises(nn.TruncatedCheckpointError):
        nn.decode_checkpoint(blob)


def test_checkpoint_spec_mismatch(tmp_path):
    path = tmp_path / "p.ckpt"
    nn.save_checkpoint(nn.init_params(SPEC, 0), path)
    with pytest.raises(nn.SpecMismatchError):
        nn.load_checkpoint(path, nn.ModelSpec(feature_dim=16))


def test_checkpoint_errors_are_distinct():
    kinds = {nn.BadMagicError, nn.TruncatedCheckpointError, nn.SpecMismatchError}
    assert len(kinds) == 3
    assert all(issubclass(k, nn.CheckpointError) for k in kinds)
    assert not issubclass(nn.BadMagicError, nn.TruncatedCheckpointError)


def test_parameter_set_is_read_only():
    params = nn.init_params(SPEC, 0)
    with pytest.raises(ValueError):
        params["head.bias"][0] = 1.0


def test_combinable_and_mismatch():
    a = nn.init_params(SPEC, 0)
    b = nn.init_params(nn.ModelSpec(head_out_dim=9), 0)
    assert a.combinable(nn.init_params(SPEC, 1))
    assert not a.combinable(b)
    with pytest.raises(nn.SpecMismatchError):
        a.with_segments({"head.weight": b["head.weight"]})


def test_adam_step_decreases_quadratic():
    work = {"w": np.array([3.0, -2.0])}
    opt = nn.Adam(lr=0.1)
    for _ in range(200):
        opt.step(work, {"w": 2.0 * work["w"]})
    assert np.abs(work["w"]).max() < 0.1
