import math

import numpy as np
import pytest

from aikd.distill import distill_loss
from aikd.network import (
    ArchitectureSpec,
    ContractError,
    EmptyAverageError,
    FrozenModelError,
    ModelParams,
    NumericError,
    SwaState,
    backward,
    embed,
    forward,
    grad_check,
    init_params,
    sgd_step,
    swa_finalize,
    swa_update,
)

SMALL = ArchitectureSpec(input_shape=(4, 4, 1), backbone=(8, 6, 4), head=(5, 1))


def _randomize(model, seed):
    gen = np.random.default_rng(seed)
    for b in model.biases:
        b[:] = gen.uniform(-0.1, 0.1, size=b.shape)
    return model


def test_spec_validation():
    with pytest.raises(ContractError):
        ArchitectureSpec(backbone=(16, 1))
    with pytest.raises(ContractError):
        ArchitectureSpec(head=(8, 2))
    assert ArchitectureSpec().input_dim == 1024
    assert ArchitectureSpec.from_dict(SMALL.to_dict()) == SMALL


def test_init_is_deterministic_and_biases_zero():
    a = init_params(SMALL, 3)
    b = init_params(SMALL, 3)
    assert a.to_bytes() == b.to_bytes()
    assert all(not bias.any() for bias in a.biases)
    assert init_params(SMALL, 4).to_bytes() != a.to_bytes()


def test_init_weight_spread():
    spec = ArchitectureSpec(input_shape=(32, 32, 1), backbone=(256, 64), head=(32, 1))
    model = init_params(spec, 0)
    for w in model.weights:
        fan_in = w.shape[0]
        expected = 1.0 / math.sqrt(3 * fan_in)  # std of U(-1/sqrt(n), 1/sqrt(n))
        assert abs(w.std() - expected) < 0.2 * expected
        assert np.abs(w).max() <= 1.0 / math.sqrt(fan_in)


def test_zero_weights_give_half_quality():
    model = init_params(SMALL, 0)
    for a in model.arrays():
        a[...] = 0.0
    e, q, _ = forward(model, np.ones(16))
    assert not e.any()
    assert q == 0.5


def test_identity_backbone_passes_input_through():
    spec = ArchitectureSpec(input_shape=(2, 2, 1), backbone=(4,), head=(1,))
    model = init_params(spec, 0)
    model.weights[0][...] = np.eye(4)
    x = np.array([0.1, -0.2, 0.3, 0.9])
    e, _, _ = forward(model, x)
    assert np.array_equal(e, x)


def test_toy_network_by_hand():
    spec = ArchitectureSpec(input_shape=(2, 2, 1), backbone=(2, 2), head=(1,))
    model = ModelParams(
        spec,
        [np.array([[1.0, 0], [0, 1], [1, -1], [0, 2]]), np.array([[1.0, -1], [3, 2]]), np.array([[0.5], [1.0]])],
        [np.array([0.5, 0.25]), np.array([0.0, 1.0]), np.array([0.25])],
    )
    x = np.array([1.0, 2.0, 0.5, -1.0])
    # z1 = [1 + 0.5 + 0.5, 2 - 0.5 - 2 + 0.25] = [2, -0.25] -> relu [2, 0]
    # e = [2*1 + 0, 2*(-1) + 0 + 1] = [2, -1]; logit = 1 - 1 + 0.25
    e, q, _ = forward(model, x)
    np.testing.assert_allclose(e, [2.0, -1.0], atol=1e-12)
    assert q == pytest.approx(1.0 / (1.0 + math.exp(-0.25)), abs=1e-12)


def test_forward_rejects_bad_input():
    model = init_params(SMALL, 0)
    with pytest.raises(ContractError):
        forward(model, np.zeros(15))
    bad = np.zeros(16)
    bad[3] = np.nan
    with pytest.raises(NumericError):
        forward(model, bad)


def test_forward_is_deterministic(rng):
    model = _randomize(init_params(SMALL, 1), 1)
    x = rng.normal(size=(7, 16))
    a = forward(model, x)
    b = forward(model, x)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert np.array_equal(embed(model, x), a[0])


def test_batch_matches_single(rng):
    model = _randomize(init_params(SMALL, 2), 2)
    x = rng.normal(size=(3, 16))
    eb, qb, _ = forward(model, x)
    for i in range(3):
        e, q, _ = forward(model, x[i])
        np.testing.assert_allclose(e, eb[i], atol=1e-14)
        assert q == pytest.approx(qb[i], abs=1e-14)


def test_zero_upstream_zero_gradient(rng):
    model = init_params(SMALL, 0)
    _, _, tape = forward(model, rng.normal(size=16))
    grads = backward(model, tape, np.zeros(4), 0.0)
    assert all(not g.any() for g in grads)


def test_linear_model_gradient_is_input_outer_product():
    spec = ArchitectureSpec(input_shape=(3, 1, 1), backbone=(2,), head=(1,), quality_activation="identity")
    model = init_params(spec, 0)
    x = np.array([0.5, -1.0, 2.0])
    _, _, tape = forward(model, x)
    grads = backward(model, tape, np.zeros(2), 1.0)
    # L = (x W0 + b0) W1 + b1  =>  dL/dW1 = e, dL/dW0 = outer(x, W1)
    e = x @ model.weights[0]
    np.testing.assert_allclose(grads[2][:, 0], e, atol=1e-15)
    np.testing.assert_allclose(grads[0], np.outer(x, model.weights[1][:, 0]), atol=1e-15)


def test_backward_shape_contract(rng):
    model = init_params(SMALL, 0)
    _, _, tape = forward(model, rng.normal(size=16))
    with pytest.raises(ContractError):
        backward(model, tape, np.zeros(3), 0.0)


def _quadratic_loss(target):
    def fn(model, x):
        spec = model.spec
        e, q, tape = forward(model, x)
        r = e - target
        return float(0.5 * r @ r + 0.5 * q * q), backward(model, tape, r, q)
    return fn


def test_grad_check_exact_on_quadratic_linear_model(rng):
    spec = ArchitectureSpec(input_shape=(3, 1, 1), backbone=(2,), head=(1,), quality_activation="identity")
    model = init_params(spec, 0)
    err = grad_check(model, rng.normal(size=3), _quadratic_loss(np.array([0.3, -0.1])))
    assert err < 1e-10


def _objective_fn(e_t, q):
    return lambda model, x: distill_loss(model, x, e_t, q)


def test_grad_check_full_objective(rng):
    model = _randomize(init_params(SMALL, 5), 5)
    x = rng.uniform(-1, 1, size=(2, 16))
    err = grad_check(model, x, _objective_fn(rng.normal(size=(2, 4)), rng.uniform(size=2)))
    assert err < 1e-4


def test_grad_check_detects_corruption(rng):
    model = _randomize(init_params(SMALL, 6), 6)
    x = rng.uniform(-1, 1, size=(2, 16))
    base = _objective_fn(rng.normal(size=(2, 4)), rng.uniform(size=2))

    def corrupted(m, s):
        loss, grads = base(m, s)
        grads[0] = grads[0].copy()
        flat = grads[0].reshape(-1)
        flat[np.argmax(np.abs(flat))] *= 2.0
        return loss, grads

    assert grad_check(model, x, corrupted) > 0.3


def test_sgd_step_arithmetic():
    spec = ArchitectureSpec(input_shape=(1, 1, 1), backbone=(2,), head=(1,))
    model = init_params(spec, 0)
    for a in model.arrays():
        a[...] = 1.0
    grads = [np.full(a.shape, 0.5) for a in model.arrays()]
    sgd_step(model, grads, 0.05)
    assert all(np.all(a == 0.975) for a in model.arrays())
    before = model.to_bytes()
    sgd_step(model, grads, 0.0)
    assert model.to_bytes() == before


def test_frozen_model_refuses_updates():
    model = init_params(SMALL, 0).freeze()
    before = model.to_bytes()
    grads = [np.ones(a.shape) for a in model.arrays()]
    with pytest.raises(FrozenModelError):
        sgd_step(model, grads, 0.1)
    with pytest.raises(ValueError):
        model.weights[0][0, 0] = 3.0  # read-only buffer
    assert model.to_bytes() == before


def test_swa_single_snapshot_exact():
    model = _randomize(init_params(SMALL, 1), 1)
    state = swa_update(SwaState(), model)
    assert swa_finalize(state).to_bytes() == model.to_bytes()


def test_swa_two_scalars():
    spec = ArchitectureSpec(input_shape=(1, 1, 1), backbone=(2,), head=(1,))
    m = init_params(spec, 0)
    state = SwaState()
    for v in (2.0, 4.0):
        for a in m.arrays():
            a[...] = v
        swa_update(state, m)
    assert all(np.all(a == 3.0) for a in swa_finalize(state).arrays())


def test_swa_matches_direct_mean():
    snaps = [_randomize(init_params(SMALL, s), s) for s in range(7)]
    state = SwaState()
    for m in snaps:
        swa_update(state, m)
    avg = swa_finalize(state)
    for i, a in enumerate(avg.arrays()):
        direct = sum(m.arrays()[i] for m in snaps) / 7
        np.testing.assert_allclose(a, direct, rtol=0, atol=1e-12)
    assert state.count == 7


def test_swa_empty_finalize():
    with pytest.raises(EmptyAverageError):
        swa_finalize(SwaState())
