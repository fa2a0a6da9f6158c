import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faun.data import ExampleBatch
from faun.errors import ConfigError, DataError
from faun.model import (ModelSpec, OptimizerState, forward, gradient, l2_norm, per_example_loss,
                        predict, project_l2_ball, sgd_step)


def random_case(gen, hidden=(5,), n=7, d=4, k=3):
    spec = ModelSpec(d, hidden, k)
    params = gen.normal(0, 0.7, spec.num_params)
    batch = ExampleBatch(gen.normal(size=(n, d)), gen.integers(0, k, n))
    return spec, params, batch


def central_difference(spec, params, batch, h=1e-5):
    out = np.empty_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = h
        out[i] = (forward(params + e, spec, batch)[1] - forward(params - e, spec, batch)[1]) / (2 * h)
    return out


def test_layout_sizes():
    spec = ModelSpec(4, (3,), 2)
    assert spec.layer_shapes == [(4, 3), (3, 2)]
    assert spec.num_params == 4 * 3 + 3 + 3 * 2 + 2


def test_flat_layout_is_weights_then_bias():
    spec = ModelSpec(2, (), 3)
    params = np.arange(spec.num_params, dtype=float)
    [(w, b)] = spec.unflatten(params)
    np.testing.assert_array_equal(w, [[0, 1, 2], [3, 4, 5]])
    np.testing.assert_array_equal(b, [6, 7, 8])


def test_flatten_roundtrip_bit_exact():
    gen = np.random.default_rng(0)
    spec = ModelSpec(6, (4, 3), 5)
    params = gen.normal(size=spec.num_params)
    assert spec.flatten(spec.unflatten(params)).tobytes() == params.tobytes()


def test_zero_weights_give_uniform_loss():
    spec = ModelSpec(3, (), 4)
    batch = ExampleBatch(np.random.default_rng(1).normal(size=(5, 3)), np.array([0, 1, 2, 3, 0]))
    out, loss = forward(np.zeros(spec.num_params), spec, batch)
    assert out.shape == (5, 4)
    np.testing.assert_allclose(out, 0.0)
    assert loss == pytest.approx(math.log(4), abs=1e-15)


def test_large_margin_loss_tends_to_zero():
    spec = ModelSpec(1, (), 3)
    params = np.zeros(spec.num_params)
    params[spec.num_params - 3 + 2] = 100.0  # bias of the true class
    _, loss = forward(params, spec, ExampleBatch(np.zeros((1, 1)), np.array([2])))
    assert loss < 1e-40


def test_hand_computed_loss():
    # weights and inputs chosen by hand; value from a scalar-arithmetic script
    spec = ModelSpec(2, (), 2)
    params = np.array([1.0, -1.0, 0.5, 2.0, 0.1, -0.2])
    batch = ExampleBatch(np.array([[1.0, 2.0], [-1.0, 0.5]]), np.array([0, 1]))
    assert forward(params, spec, batch)[1] == pytest.approx(0.5929787856695052, rel=1e-14)


@pytest.mark.parametrize("hidden", [(), (5,), (4, 3)])
def test_gradient_matches_finite_differences(hidden):
    gen = np.random.default_rng(len(hidden))
    for _ in range(5):
        spec, params, batch = random_case(gen, hidden)
        g = gradient(params, spec, batch)
        fd = central_difference(spec, params, batch)
        assert np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(fd))) < 1e-6


def test_gradient_invariant_to_duplicating_batch():
    spec, params, batch = random_case(np.random.default_rng(3))
    doubled = ExampleBatch.concat([batch, batch])
    np.testing.assert_allclose(gradient(params, spec, doubled), gradient(params, spec, batch), atol=1e-15)


def test_gradient_vanishes_at_separable_optimum():
    # linear model, two separable points, huge margin along the separating direction
    spec = ModelSpec(1, (), 2)
    params = np.array([-60.0, 60.0, 0.0, 0.0])
    batch = ExampleBatch(np.array([[-1.0], [1.0]]), np.array([0, 1]))
    assert np.max(np.abs(gradient(params, spec, batch))) < 1e-6


def test_stacked_params_match_individual():
    gen = np.random.default_rng(4)
    spec, params, batch = random_case(gen, (5,))
    stack = np.stack([params, gen.normal(size=params.size)])
    loss = per_example_loss(stack, spec, batch.features, batch.labels)
    for i in range(2):
        np.testing.assert_allclose(loss[i], per_example_loss(stack[i], spec, batch.features, batch.labels))


def test_predict_breaks_ties_to_lowest_class():
    spec = ModelSpec(2, (), 3)
    assert predict(np.zeros(spec.num_params), spec, np.ones((2, 2))).tolist() == [0, 0]


def test_forward_input_errors():
    spec = ModelSpec(2, (), 2)
    params = np.zeros(spec.num_params)
    with pytest.raises(ConfigError):
        forward(params, spec, ExampleBatch(np.zeros((1, 3)), np.array([0])))
    with pytest.raises(DataError):
        forward(params, spec, ExampleBatch(np.array([[np.nan, 0.0]]), np.array([0])))
    with pytest.raises(DataError):
        forward(params, spec, ExampleBatch(np.zeros((1, 2)), np.array([2])))
    with pytest.raises(ConfigError):
        forward(np.zeros(5), spec, ExampleBatch(np.zeros((1, 2)), np.array([0])))


def test_model_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec(3, (), 1)
    with pytest.raises(ConfigError):
        ModelSpec(3, (0,), 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_is_non_negative(seed):
    spec, params, batch = random_case(np.random.default_rng(seed))
    params = params * 20
    assert np.all(per_example_loss(params, spec, batch.features, batch.labels) >= 0)


def test_plain_sgd_step():
    g = np.array([1.0, -2.0, 0.5])
    w = np.array([0.3, 0.2, 0.1])
    state = OptimizerState.zeros(3, 0.01, 0.0)
    np.testing.assert_array_equal(sgd_step(w, g, state), w - 0.01 * g)


def test_zero_gradient_leaves_params():
    w = np.array([0.3, 0.2])
    state = OptimizerState.zeros(2, 0.1, 0.9)
    np.testing.assert_array_equal(sgd_step(w, np.zeros(2), state), w)


def test_momentum_two_steps():
    g = np.array([1.0, -3.0])
    w0 = np.array([0.5, 0.5])
    state = OptimizerState.zeros(2, 0.01, 0.9)
    w2 = sgd_step(sgd_step(w0, g, state), g, state)
    np.testing.assert_allclose(w2, w0 - 0.01 * g - 0.01 * 1.9 * g, rtol=0, atol=1e-15)
    np.testing.assert_allclose(state.velocity, 1.9 * g)


def test_sgd_dimension_mismatch():
    with pytest.raises(ConfigError):
        sgd_step(np.zeros(3), np.zeros(2), OptimizerState.zeros(3, 0.1))
    with pytest.raises(ConfigError):
        OptimizerState(0.0)
    with pytest.raises(ConfigError):
        OptimizerState(0.1, 1.0)


def test_projection_of_zero_and_inside_points():
    assert np.array_equal(project_l2_ball(np.zeros(4), 1.0), np.zeros(4))
    v = np.array([0.3, 0.4])
    assert project_l2_ball(v, 1.0) is v


def test_projection_scales_to_radius():
    v = np.array([1.2, -1.6])  # norm 2
    out = project_l2_ball(v, 1.0)
    assert abs(l2_norm(out) - 1.0) < 1e-12
    np.testing.assert_allclose(out, v / 2, atol=1e-15)


def test_projection_rejects_non_positive_radius():
    for eps in (0.0, -1.0):
        with pytest.raises(ConfigError):
            project_l2_ball(np.ones(2), eps)


def test_projection_is_nearest_point_on_grid():
    gen = np.random.default_rng(5)
    axis = np.linspace(-1.5, 1.5, 1201)
    gx, gy = np.meshgrid(axis, axis)
    for _ in range(5):
        v = gen.normal(0, 1.5, 2)
        eps = gen.uniform(0.3, 1.2)
        inside = gx ** 2 + gy ** 2 <= eps ** 2
        dist = np.where(inside, (gx - v[0]) ** 2 + (gy - v[1]) ** 2, np.inf)
        p = project_l2_ball(v, eps)
        assert l2_norm(p) <= eps * (1 + 1e-12)
        # no feasible grid point is closer to v, and the grid gets within one cell of p
        assert l2_norm(v - p) <= np.sqrt(dist.min()) + 1e-12
        assert l2_norm(v - p) >= np.sqrt(dist.min()) - 2 * (axis[1] - axis[0])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.floats(1e-6, 1e6))
def test_projection_idempotent_and_norm_exact(seed, eps, scale):
    v = np.random.default_rng(seed).normal(size=17) * scale
    p = project_l2_ball(v, eps)
    assert l2_norm(p) <= eps
    assert project_l2_ball(p, eps).tobytes() == p.tobytes()
    if l2_norm(v) > eps:
        assert abs(l2_norm(p) - eps) <= 1e-12 * max(1.0, eps)
