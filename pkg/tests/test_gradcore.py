import numpy as np
import pytest

import src.gradcore as gradcore
from src.data import Batch
from src.exceptions import ContractError, DimensionError
from src.gradcore import AdamState, ParameterSet, Tape, adam_step, backward, flatten_grads
from src.losses import composite_terms
from src.model import forward, init_params


def numeric_gradient(loss_fn, params, names, coords, step=1e-6):
    """Central differences of loss_fn(ParameterSet) at the given (name, flat index) coordinates."""
    result = []
    for name, i in coords:
        plus, minus = params.copy(), params.copy()
        plus[name].ravel()[i] += step
        minus[name].ravel()[i] -= step
        result.append((loss_fn(plus) - loss_fn(minus)) / (2 * step))
    return np.array(result)


def relative_error(analytic, numeric):
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return np.max(np.abs(analytic - numeric)) / scale


def make_batch(rng, config, size=4):
    x_t = rng.uniform(50, 150, size=(size, config.lookback))
    x_prev = rng.uniform(50, 150, size=(size, config.lookback))
    return Batch(
        x_t=x_t,
        y_t=rng.uniform(50, 150, size=(size, config.horizon)),
        x_prev=x_prev,
        y_prev=rng.uniform(50, 150, size=(size, config.horizon)),
        scale_t=np.mean(np.diff(x_t, axis=1) ** 2, axis=1),
        scale_prev=np.mean(np.diff(x_prev, axis=1) ** 2, axis=1),
    )


# --- Gradient correctness ---

def test_quadratic_form_matches_finite_differences():
    """loss = ||W x||^2 at small random W, x."""
    rng = np.random.default_rng(3)
    params = ParameterSet({"W": rng.normal(scale=0.1, size=(3, 4))})
    x = rng.normal(scale=0.1, size=(2, 3))

    def loss_of(p, tape=None):
        tape = tape or Tape()
        nodes = tape.watch(p)
        out = gradcore.affine(gradcore.constant(x), nodes["W"], gradcore.constant(np.zeros(4)))
        return tape, gradcore.sum(gradcore.square(out))

    tape, loss = loss_of(params)
    analytic = backward(tape, loss)["W"]
    coords = [("W", i) for i in range(12)]
    numeric = numeric_gradient(lambda p: loss_of(p)[1].item(), params, ["W"], coords)

    assert relative_error(analytic.ravel(), numeric) < 1e-5


def test_affine_hand_example():
    """[[1, 1]] @ [[2], [3]] + 1 = [[6]]."""
    out = gradcore.affine(
        gradcore.constant([[1.0, 1.0]]), gradcore.constant([[2.0], [3.0]]), gradcore.constant([1.0])
    )
    np.testing.assert_array_equal(out.value, [[6.0]])


def test_affine_gradients_match_finite_differences():
    """50 random shapes; gradients of sum(C * affine(x, W, b)) for all three operands."""
    rng = np.random.default_rng(21)
    worst = 0.0
    for _ in range(50):
        batch, fan_in, fan_out = rng.integers(1, 5, size=3)
        params = ParameterSet({
            "x": rng.normal(size=(batch, fan_in)),
            "W": rng.normal(size=(fan_in, fan_out)),
            "b": rng.normal(size=(fan_out,)),
        })
        weights = rng.normal(size=(batch, fan_out))

        def loss_of(p):
            tape = Tape()
            nodes = tape.watch(p)
            out = gradcore.affine(nodes["x"], nodes["W"], nodes["b"])
            return tape, gradcore.sum(gradcore.mul(out, gradcore.constant(weights)))

        tape, loss = loss_of(params)
        grads = backward(tape, loss)
        coords = [(name, i) for name in params.names for i in range(params[name].size)]
        analytic = np.array([grads[name].ravel()[i] for name, i in coords])
        numeric = numeric_gradient(lambda p: loss_of(p)[1].item(), params, params.names, coords)
        worst = max(worst, relative_error(analytic, numeric))

    assert worst < 1e-6


def test_relu_gradients_match_finite_differences():
    """50 random inputs kept clear of the kink at 0."""
    rng = np.random.default_rng(22)
    worst = 0.0
    for _ in range(50):
        x = rng.normal(size=(3, 4))
        x[np.abs(x) < 1e-3] = 0.5
        params = ParameterSet({"x": x})
        weights = rng.normal(size=(3, 4))

        def loss_of(p):
            tape = Tape()
            nodes = tape.watch(p)
            return tape, gradcore.sum(gradcore.mul(gradcore.relu(nodes["x"]), gradcore.constant(weights)))

        tape, loss = loss_of(params)
        analytic = backward(tape, loss)["x"].ravel()
        coords = [("x", i) for i in range(12)]
        numeric = numeric_gradient(lambda p: loss_of(p)[1].item(), params, ["x"], coords)
        worst = max(worst, relative_error(analytic, numeric))

    assert worst < 1e-6


def test_backward_is_linear_in_the_loss(tiny_model_config):
    """grad(a*L1 + b*L2) = a*grad(L1) + b*grad(L2) on one tape."""
    rng = np.random.default_rng(5)
    batch = make_batch(rng, tiny_model_config)
    tape = Tape()
    nodes = tape.watch(init_params(tiny_model_config, seed=3))
    terms = composite_terms(
        forward(batch.x_t, nodes, tiny_model_config),
        forward(batch.x_prev, nodes, tiny_model_config),
        batch.y_t, batch.y_prev, batch.scale_t, batch.scale_prev,
    )
    a, b = 0.7, -2.5

    g_error = backward(tape, terms.error)
    g_instability = backward(tape, terms.instability)
    g_combined = backward(tape, gradcore.add(gradcore.scale(terms.error, a), gradcore.scale(terms.instability, b)))

    for name in g_combined:
        np.testing.assert_allclose(g_combined[name], a * g_error[name] + b * g_instability[name],
                                   rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("term", ["error", "instability"])
def test_nbeats_loss_gradients_match_finite_differences(tiny_model_config, term):
    """20 random parameter draws of a K=2, width-8, T=12, h=6 network, both task losses."""
    rng = np.random.default_rng(11)
    worst = 0.0
    for draw in range(20):
        params = init_params(tiny_model_config, seed=draw)
        batch = make_batch(rng, tiny_model_config)

        def loss_of(p):
            tape = Tape()
            nodes = tape.watch(p)
            terms = composite_terms(
                forward(batch.x_t, nodes, tiny_model_config),
                forward(batch.x_prev, nodes, tiny_model_config),
                batch.y_t, batch.y_prev, batch.scale_t, batch.scale_prev,
            )
            return tape, getattr(terms, term)

        tape, loss = loss_of(params)
        grads = backward(tape, loss)

        names = params.names
        coords = []
        for _ in range(25):
            name = names[rng.integers(len(names))]
            coords.append((name, int(rng.integers(params[name].size))))
        analytic = np.array([grads[name].ravel()[i] for name, i in coords])
        numeric = numeric_gradient(lambda p: loss_of(p)[1].item(), params, names, coords)
        worst = max(worst, relative_error(analytic, numeric))

    assert worst < 1e-5


def test_backward_accumulates_shared_nodes():
    """A parameter used twice receives the sum of both paths."""
    tape = Tape()
    w = tape.parameter("w", np.array([3.0]))
    loss = gradcore.sum(gradcore.mul(w, w))
    assert backward(tape, loss)["w"] == pytest.approx([6.0])


def test_backward_can_run_twice_on_one_tape():
    """Two task losses differentiated from a single forward pass."""
    tape = Tape()
    w = tape.parameter("w", np.array([2.0, -1.0]))
    first = gradcore.sum(gradcore.square(w))
    second = gradcore.sum(gradcore.scale(w, 3.0))

    g_first = backward(tape, first)["w"]
    g_second = backward(tape, second)["w"]

    np.testing.assert_allclose(g_first, [4.0, -2.0])
    np.testing.assert_allclose(g_second, [3.0, 3.0])


def test_unreached_parameter_gets_zero_gradient():
    tape = Tape()
    used = tape.parameter("used", np.ones(2))
    tape.parameter("unused", np.ones((2, 3)))
    grads = backward(tape, gradcore.sum(used))

    assert list(grads) == ["used", "unused"]
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 3)))


def test_sqrt_has_zero_subgradient_at_zero():
    """A perfect forecast must not produce inf/nan gradients."""
    tape = Tape()
    w = tape.parameter("w", np.array([0.0, 4.0]))
    grads = backward(tape, gradcore.sum(gradcore.sqrt(gradcore.square(w))))["w"]
    assert np.all(np.isfinite(grads))
    np.testing.assert_allclose(grads, [0.0, 1.0])


def test_relu_subgradient_at_zero_is_zero():
    tape = Tape()
    w = tape.parameter("w", np.array([-1.0, 0.0, 2.0]))
    grads = backward(tape, gradcore.sum(gradcore.relu(w)))["w"]
    np.testing.assert_array_equal(grads, [0.0, 0.0, 1.0])


def test_columns_gradient_scatters_into_slice():
    tape = Tape()
    w = tape.parameter("w", np.arange(6.0).reshape(2, 3))
    grads = backward(tape, gradcore.sum(gradcore.columns(w, 1, 3)))["w"]
    np.testing.assert_array_equal(grads, [[0, 1, 1], [0, 1, 1]])


# --- Contracts ---

def test_backward_rejects_non_scalar_loss():
    tape = Tape()
    w = tape.parameter("w", np.ones(3))
    with pytest.raises(ContractError):
        backward(tape, gradcore.square(w))


def test_backward_rejects_foreign_tape():
    tape, other = Tape(), Tape()
    w = other.parameter("w", np.ones(1))
    with pytest.raises(ContractError):
        backward(tape, gradcore.sum(w))


def test_duplicate_parameter_name_is_rejected():
    tape = Tape()
    tape.parameter("w", np.ones(1))
    with pytest.raises(ContractError):
        tape.parameter("w", np.ones(1))


def test_mixing_tapes_is_rejected():
    a = Tape().parameter("a", np.ones(2))
    b = Tape().parameter("b", np.ones(2))
    with pytest.raises(ContractError):
        gradcore.add(a, b)


@pytest.mark.parametrize("x_shape,w_shape,b_shape", [
    ((2, 3), (4, 5), (5,)),
    ((2, 3), (3, 5), (4,)),
    ((3,), (3, 5), (5,)),
])
def test_affine_shape_mismatch_raises(x_shape, w_shape, b_shape):
    with pytest.raises(DimensionError):
        gradcore.affine(
            gradcore.constant(np.ones(x_shape)),
            gradcore.constant(np.ones(w_shape)),
            gradcore.constant(np.ones(b_shape)),
        )


def test_elementwise_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        gradcore.add(gradcore.constant(np.ones(2)), gradcore.constant(np.ones(3)))


def test_constants_never_receive_gradients():
    tape = Tape()
    w = tape.parameter("w", np.ones(2))
    c = gradcore.constant(np.array([5.0, 7.0]))
    grads = backward(tape, gradcore.sum(gradcore.mul(w, c)))
    assert list(grads) == ["w"]
    np.testing.assert_array_equal(grads["w"], [5.0, 7.0])


# --- ParameterSet ---

def test_flatten_unflatten_preserves_order_and_shape():
    params = ParameterSet({"a": np.arange(6.0).reshape(2, 3), "b": np.array([10.0, 11.0])})
    flat = params.flatten()
    np.testing.assert_array_equal(flat, [0, 1, 2, 3, 4, 5, 10, 11])

    back = params.unflatten(flat * 2)
    assert back.names == ["a", "b"]
    np.testing.assert_array_equal(back["a"], np.arange(6.0).reshape(2, 3) * 2)


def test_unflatten_wrong_length_raises():
    with pytest.raises(DimensionError):
        ParameterSet({"a": np.zeros(3)}).unflatten(np.zeros(4))


def test_merge_rejects_overlapping_names():
    with pytest.raises(ContractError):
        ParameterSet({"a": np.zeros(1)}).merge(ParameterSet({"a": np.zeros(1)}))


def test_flatten_grads_follows_given_order():
    grads = {"b": np.array([3.0]), "a": np.array([1.0, 2.0])}
    np.testing.assert_array_equal(flatten_grads(grads, ["a", "b"]), [1.0, 2.0, 3.0])


# --- Adam ---

def test_adam_first_step_moves_by_learning_rate():
    """Bias correction makes the first update exactly lr * sign(g) (up to eps)."""
    params = ParameterSet({"w": np.array([1.0, -1.0])})
    state = AdamState(learning_rate=0.05)
    updated = adam_step(params, {"w": np.array([2.0, -0.5])}, state)

    np.testing.assert_allclose(updated["w"], [0.95, -0.95], atol=1e-9)
    assert state.step == 1


def test_adam_zero_gradient_leaves_parameters_unchanged():
    """Test a zero gradient on a fresh state."""
    params = ParameterSet({"w": np.array([1.5, -2.0]), "b": np.zeros(3)})
    state = AdamState(learning_rate=0.1)

    updated = adam_step(params, {"w": np.zeros(2), "b": np.zeros(3)}, state)

    np.testing.assert_array_equal(updated.flatten(), params.flatten())
    assert state.step == 1


def test_adam_minimizes_quadratic():
    """100 steps on f(w) = w^2 from w = 1 with lr 0.05."""
    params = ParameterSet({"w": np.array([1.0])})
    state = AdamState(learning_rate=0.05)
    for _ in range(100):
        params = adam_step(params, {"w": 2.0 * params["w"]}, state)
    assert abs(params["w"][0]) < 0.1


def test_adam_does_not_mutate_input_parameters():
    params = ParameterSet({"w": np.array([1.0])})
    adam_step(params, {"w": np.array([1.0])}, AdamState(learning_rate=0.1))
    assert params["w"][0] == 1.0


def test_adam_key_mismatch_raises():
    params = ParameterSet({"w": np.array([1.0])})
    with pytest.raises(ContractError):
        adam_step(params, {"v": np.array([1.0])}, AdamState(learning_rate=0.1))


def test_adam_shape_mismatch_raises():
    params = ParameterSet({"w": np.array([1.0, 2.0])})
    with pytest.raises(DimensionError):
        adam_step(params, {"w": np.array([1.0])}, AdamState(learning_rate=0.1))


def test_adam_state_copy_is_independent():
    state = AdamState(learning_rate=0.1)
    adam_step(ParameterSet({"w": np.array([1.0])}), {"w": np.array([1.0])}, state)
    snapshot = state.copy()
    adam_step(ParameterSet({"w": np.array([1.0])}), {"w": np.array([1.0])}, state)

    assert snapshot.step == 1
    assert state.step == 2
    assert snapshot.first_moment["w"][0] != state.first_moment["w"][0]
