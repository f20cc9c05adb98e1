import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udil import diffcore as dc
from udil.diffcore import DiscriminatorState, EncoderState


def _small_instance(seed):
    r = np.random.default_rng(seed)
    m, n = int(r.integers(1, 4)), int(r.integers(1, 5))
    d = DiscriminatorState.init(2 * m, (8, 8), seed=seed)
    enc = EncoderState.init(n, m, seed=seed, use_bias=bool(seed % 2))
    enc = enc.with_params({"weight": r.normal(size=(m, n)), "bias": r.normal(size=m)})
    return r, m, n, d, enc


# -- encoder --------------------------------------------------------------------

def test_zero_raw_params_give_zero_output():
    enc = EncoderState(np.zeros((2, 3)), np.zeros(2), use_bias=True)
    np.testing.assert_array_equal(dc.encoder_apply(enc, [1.0, -2.0, 3.0]), [0.0, 0.0])


def test_saturated_weight_near_bound():
    enc = EncoderState(np.array([[50.0]]), np.zeros(1))
    w = enc.weight[0, 0]
    assert 0 < 5.0 - w < 1e-8


def test_hand_evaluated_encoder():
    enc = EncoderState(np.array([[0.405465]]), np.zeros(1))
    assert dc.encoder_apply(enc, [2.0])[0] == pytest.approx(2.0, abs=1e-5)


def test_encoder_dim_mismatch():
    with pytest.raises(ValueError):
        dc.encoder_apply(EncoderState.init(3, 1), np.zeros(2))


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8))
def test_effective_params_strictly_bounded(raw):
    enc = EncoderState(np.array([raw]), np.array([raw[0]]), use_bias=True)
    assert (np.abs(enc.weight) < 5.0).all() and (np.abs(enc.bias) < 5.0).all()


def test_no_bias_contributes_exact_zero():
    enc = EncoderState(np.zeros((1, 2)), np.array([3.0]), use_bias=False)
    np.testing.assert_array_equal(enc.bias, [0.0])


@given(st.integers(0, 10_000))
def test_encoder_superposition(seed):
    r = np.random.default_rng(seed)
    enc = EncoderState(r.normal(size=(2, 4)), r.normal(size=2), use_bias=True)
    s1, s2 = r.normal(size=4), r.normal(size=4)
    a, b = r.normal(size=2)
    lin = lambda s: dc.encoder_apply(enc, s) - enc.bias
    np.testing.assert_allclose(lin(a * s1 + b * s2), a * lin(s1) + b * lin(s2), atol=1e-12)


@given(st.integers(0, 10_000))
def test_pair_is_componentwise(seed):
    r = np.random.default_rng(seed)
    enc = EncoderState(r.normal(size=(2, 3)), r.normal(size=2), use_bias=True)
    t = r.normal(size=(5, 2, 3))
    z = dc.encoder_apply_pair(enc, t)
    np.testing.assert_array_equal(z[:, 0], dc.encoder_apply(enc, t[:, 0]))
    np.testing.assert_array_equal(z[:, 1], dc.encoder_apply(enc, t[:, 1]))
    same = dc.encoder_apply_pair(enc, np.stack([t[0, 0], t[0, 0]]))
    np.testing.assert_array_equal(same[0], same[1])


def test_negation_reverses_order():
    enc = EncoderState.from_effective([[-1.0]])
    z = dc.encoder_apply_pair(enc, np.array([[0.2], [0.7]]))
    assert z[1, 0] < z[0, 0]


def test_diagonal_mode_masks_off_diagonal():
    enc = EncoderState(np.ones((2, 2)), np.zeros(2), diagonal=True)
    assert enc.weight[0, 1] == 0.0 and enc.weight[0, 0] > 0
    with pytest.raises(ValueError):
        EncoderState(np.ones((2, 3)), np.zeros(2), diagonal=True)


# -- discriminator --------------------------------------------------------------

def test_zero_discriminator_gives_half():
    d = DiscriminatorState.init(4, (8,), seed=0)
    d = d.with_params({k: np.zeros_like(v) for k, v in d.params().items()})
    logit = dc.disc_forward(d, [1.0, 2.0], [3.0, 4.0])
    assert logit == 0.0 and 1 / (1 + math.exp(-logit)) == 0.5


def test_linear_discriminator_is_dot_product():
    d = DiscriminatorState.init(4, (), seed=3)
    x = np.array([0.5, -1.0, 2.0, 0.25])
    assert dc.disc_forward(d, x[:2], x[2:]) == pytest.approx(float(d.weights[0][0] @ x + d.biases[0][0]), abs=1e-14)


def test_discriminator_bit_stable():
    a = DiscriminatorState.init(4, seed=7)
    b = DiscriminatorState.init(4, seed=7)
    x = np.arange(4.0)
    assert dc.disc_forward(a, x[:2], x[2:]) == dc.disc_forward(b, x[:2], x[2:])


def test_discriminator_width_mismatch():
    with pytest.raises(ValueError):
        dc.disc_forward(DiscriminatorState.init(4), [1.0], [2.0])


def test_nonfinite_forward_names_layer():
    d = DiscriminatorState.init(2, (4,), seed=0)
    with pytest.raises(dc.NonFiniteError, match="layer 0"):
        dc.disc_logits(d, np.array([[np.nan, 0.0]]))


# -- gradients ------------------------------------------------------------------

def test_constant_loss_zero_gradient():
    d = DiscriminatorState.init(2, (4,), seed=0)
    d = d.with_params({k: np.zeros_like(v) for k, v in d.params().items()})
    # a zero last layer makes every upstream gradient zero
    g = dc.grad(dc.DISCRIMINATOR_LOSS, d, (np.zeros((3, 2)), np.zeros((3, 2))))
    for k in ("W0", "b0"):
        assert not g[k].any()


def test_saturated_encoder_gradient_vanishes():
    r = np.random.default_rng(0)
    d = DiscriminatorState.init(2, (8,), seed=0)
    enc = EncoderState(np.array([[50.0]]), np.zeros(1))
    g = dc.grad(dc.ENCODER_LOSS, enc, (d, r.normal(size=(16, 2, 1))))
    assert abs(g["weight"][0, 0]) < 1e-8


def test_quadratic_toy_loss():
    def quad(params, batch, need_grad):
        W = params.weights[0]
        target = batch
        loss = float(np.sum((W - target) ** 2))
        grads = {"W0": 2 * (W - target), "b0": np.zeros(1)}
        return loss, grads

    d = DiscriminatorState.init(3, (), seed=1)
    assert dc.finite_diff_check(quad, d, np.ones((1, 3))) < 1e-8


def test_discriminator_fd_batch_16():
    r = np.random.default_rng(2)
    d = DiscriminatorState.init(4, seed=2)
    err = dc.finite_diff_check(dc.DISCRIMINATOR_LOSS, d, (r.normal(size=(16, 2, 2)), r.normal(size=(16, 2, 2))),
                               keys=["W2", "b2", "b1", "b0"])
    assert err < 1e-4


def test_fd_rejects_nonpositive_eps():
    d = DiscriminatorState.init(2, (), seed=0)
    with pytest.raises(ValueError):
        dc.finite_diff_check(dc.DISCRIMINATOR_LOSS, d, (np.zeros((1, 2)), np.zeros((1, 2))), eps=0)


def test_unknown_loss_kind():
    with pytest.raises(ValueError):
        dc.loss_and_grad("hinge", DiscriminatorState.init(2, ()), None)


@settings(max_examples=100)
@given(st.integers(0, 2**31 - 1))
def test_gradients_match_finite_differences(seed):
    r, m, n, d, enc = _small_instance(seed)
    L, E = r.normal(size=(16, 2, m)), r.normal(size=(16, 2, m))
    assert dc.finite_diff_check(dc.DISCRIMINATOR_LOSS, d, (L, E)) < 1e-4
    assert dc.finite_diff_check(dc.ENCODER_LOSS, enc, (d, r.normal(size=(16, 2, n)))) < 1e-4


def test_clamped_logits_get_zero_gradient():
    log_d, log_1md, gd, g1 = dc.log_prob(np.array([100.0, -100.0, 0.0]))
    assert log_d[1] == pytest.approx(math.log(1e-6), rel=1e-6)
    assert gd[0] == gd[1] == 0.0 and g1[0] == g1[1] == 0.0
    assert gd[2] == 0.5


# -- optimiser ------------------------------------------------------------------

def test_adam_zero_gradient_noop():
    d = DiscriminatorState.init(2, (4,), seed=0)
    out = dc.adam_step(d, {k: np.zeros_like(v) for k, v in d.params().items()}, 1e-3)
    for k, v in d.params().items():
        np.testing.assert_array_equal(out.params()[k], v)
    assert out.step_count == 1


def test_adam_first_step_sign():
    enc = EncoderState.init(3, 2, seed=0)
    g = {"weight": np.array([[1.0, -2.0, 0.5], [-1e-3, 3.0, -4.0]]), "bias": np.zeros(2)}
    out = dc.adam_step(enc, g, 0.01)
    step = out.raw_weight - enc.raw_weight
    np.testing.assert_allclose(step, -0.01 * np.sign(g["weight"]), rtol=1e-4)


def test_adam_validation():
    enc = EncoderState.init(1, 1)
    with pytest.raises(ValueError):
        dc.adam_step(enc, {"weight": np.zeros((1, 1)), "bias": np.zeros(1)}, 0.0)
    with pytest.raises(FloatingPointError):
        dc.adam_step(enc, {"weight": np.array([[np.nan]]), "bias": np.zeros(1)}, 1e-3)


def test_training_deterministic():
    def run():
        r = np.random.default_rng(0)
        d = DiscriminatorState.init(2, (8,), seed=0)
        for _ in range(20):
            _, g = dc.discriminator_loss_and_grad(d, r.normal(size=(8, 2)), r.normal(size=(8, 2)) + 1)
            d = dc.adam_step(d, g, 1e-2)
        return d

    a, b = run(), run()
    for k in a.params():
        np.testing.assert_array_equal(a.params()[k], b.params()[k])


def test_checkpoint_round_trip(tmp_path):
    enc = dc.adam_step(EncoderState.init(3, 2, seed=4, use_bias=True),
                       {"weight": np.ones((2, 3)), "bias": np.ones(2)}, 1e-3)
    d = DiscriminatorState.init(4, (5, 3), seed=1)
    for state, name in ((enc, "e.json"), (d, "d.json")):
        dc.save_checkpoint(tmp_path / name, state)
        back = dc.load_checkpoint(tmp_path / name)
        assert type(back) is type(state) and back.step_count == state.step_count
        for k in state.params():
            np.testing.assert_array_equal(back.params()[k], state.params()[k])
            np.testing.assert_array_equal(back.moments.m[k], state.moments.m[k])
    (tmp_path / "x.json").write_text(json.dumps({"kind": "policy"}))
    with pytest.raises(ValueError):
        dc.load_checkpoint(tmp_path / "x.json")


@given(st.integers(0, 10_000))
def test_loss_terms_sum_to_loss(seed):
    r, m, n, d, enc = _small_instance(seed)
    batch = (r.normal(size=(9, 2, m)), r.normal(size=(7, 2, m)))
    assert math.fsum(dc.loss_terms(dc.DISCRIMINATOR_LOSS, d, batch)) == pytest.approx(
        dc.loss_value(dc.DISCRIMINATOR_LOSS, d, batch), abs=1e-12)
    batch = (d, r.normal(size=(5, 2, n)))
    assert math.fsum(dc.loss_terms(dc.ENCODER_LOSS, enc, batch)) == pytest.approx(
        dc.loss_value(dc.ENCODER_LOSS, enc, batch), abs=1e-12)
