"""
Tests for the tape autodiff, the finite-difference oracle, Adam and
checkpoint archives.
"""

import math

import numpy as np
import pytest

from app.core.exceptions import ConfigurationError, NumericError, ShapeError
from app.schemas.config import ModelConfig
from app.services import autodiff as ad
from app.services.autodiff import Tape, Tensor
from app.services.checkpoint import FORMAT_TAG, load_checkpoint, load_model, save_checkpoint
from app.services.model import init_params
from app.services.optim import AdamState, adam_step, finite_diff_check, gradients

TOLERANCE = 1e-4


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ad.sum_(ad.mul(out, weights))


def test_forward_values():
    assert np.allclose(ad.softmax(Tensor([0.0, 0.0])).value, [0.5, 0.5])
    assert float(ad.sigmoid(Tensor(0.0)).value) == 0.5
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]])).value, [[3, 4], [5, 6]])
    x = Tensor(np.random.default_rng(0).normal(size=(3, 5)))
    assert np.allclose(ad.softmax(x).value.sum(axis=-1), 1.0)
    assert np.allclose(np.exp(ad.log_softmax(x).value).sum(axis=-1), 1.0)


def test_softmax_normalizes_large_inputs():
    rng = np.random.default_rng(2)
    x = np.vstack([rng.uniform(-50, 50, size=(300, 16)), np.full((1, 16), 50.0), np.tile([-50.0, 50.0], (1, 8))])
    for axis in (-1, 0):
        out = ad.softmax(Tensor(x), axis=axis).value
        assert np.all(out >= 0)
        assert np.max(np.abs(out.sum(axis=axis) - 1.0)) <= 1e-12


def test_layer_norm_standardizes_each_row():
    x = np.random.default_rng(3).normal(3.0, 10.0, size=(200, 32))
    out = ad.layer_norm(Tensor(x)).value
    assert np.max(np.abs(out.mean(axis=-1))) < 1e-9
    assert np.max(np.abs(out.var(axis=-1) - 1.0)) <= 1e-6


def test_backward_examples():
    tape = Tape()
    w = tape.leaf(3.0, "w")
    grads = tape.backward(ad.mul(w, w))
    assert float(grads["w"]) == 6.0

    tape = Tape()
    x = tape.leaf(np.random.default_rng(1).normal(size=5), "x")
    grads = tape.backward(ad.sum_(ad.softmax(x)))
    assert np.allclose(grads["x"], 0.0, atol=1e-12)

    tape = Tape()
    a, b = tape.leaf([1.0, 2.0], "a"), tape.leaf([3.0, 4.0], "b")
    grads = tape.backward(ad.dot(a, b))
    assert np.array_equal(grads["a"], [3.0, 4.0])
    assert np.array_equal(grads["b"], [1.0, 2.0])


def test_unused_leaf_gets_zero_gradient():
    tape = Tape()
    a = tape.leaf([1.0, 2.0], "a")
    tape.leaf(np.ones((2, 3)), "unused")
    grads = tape.backward(ad.sum_(a))
    assert np.array_equal(grads["unused"], np.zeros((2, 3)))


def test_shared_subexpression_accumulates():
    tape = Tape()
    w = tape.leaf(2.0, "w")
    y = ad.add(ad.mul(w, w), ad.scale(w, 3.0))
    assert float(tape.backward(y)["w"]) == 7.0


def test_backward_requires_scalar_root():
    tape = Tape()
    a = tape.leaf([1.0, 2.0], "a")
    with pytest.raises(NumericError):
        tape.backward(ad.scale(a, 2.0))


def test_shape_errors_name_the_primitive():
    with pytest.raises(ShapeError) as info:
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert info.value.primitive == "matmul"
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        ad.gather(Tensor(np.ones((3, 2))), np.array([0, 3]))
    with pytest.raises(NumericError):
        ad.softmax(Tensor(np.ones((2, 0))))


PRIMITIVE_CASES = {
    "add": (lambda p: ad.add(p["a"], p["b"]), {"a": (2, 3, 4), "b": (3, 4)}),
    "sub": (lambda p: ad.sub(p["a"], p["b"]), {"a": (3, 4), "b": (1, 4)}),
    "mul": (lambda p: ad.mul(p["a"], p["b"]), {"a": (2, 3, 4), "b": (2, 1, 4)}),
    "scale": (lambda p: ad.scale(p["a"], -1.7), {"a": (3, 4)}),
    "matmul": (lambda p: ad.matmul(p["a"], p["b"]), {"a": (2, 3, 4), "b": (4, 5)}),
    "dot": (lambda p: ad.dot(p["a"], p["b"]), {"a": (3, 4), "b": (3, 4)}),
    "concat": (lambda p: ad.concat([p["a"], p["b"]], axis=1), {"a": (2, 3, 2), "b": (2, 1, 2)}),
    "reshape": (lambda p: ad.reshape(p["a"], (4, 6)), {"a": (2, 3, 4)}),
    "swapaxes": (lambda p: ad.swapaxes(p["a"], 1, 2), {"a": (2, 3, 4)}),
    "slice": (lambda p: ad.take(p["a"], (slice(1, None),)), {"a": (4, 3)}),
    "sum": (lambda p: ad.sum_(p["a"], axis=1), {"a": (2, 3, 4)}),
    "mean": (lambda p: ad.mean(p["a"], axis=-1, keepdims=True), {"a": (2, 3, 4)}),
    "sigmoid": (lambda p: ad.sigmoid(p["a"]), {"a": (3, 4)}),
    "gelu": (lambda p: ad.gelu(p["a"]), {"a": (2, 3, 4)}),
    "softmax": (lambda p: ad.softmax(p["a"], axis=-1), {"a": (2, 3, 4)}),
    "log_softmax": (lambda p: ad.log_softmax(p["a"], axis=1), {"a": (2, 3, 4)}),
    "layer_norm": (lambda p: ad.layer_norm(p["a"]), {"a": (2, 3, 6)}),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    build, shapes = PRIMITIVE_CASES[name]
    rng = np.random.default_rng(7)
    params = {key: rng.normal(size=shape) for key, shape in shapes.items()}
    out_shape = build({k: Tensor(v) for k, v in params.items()}).shape
    weights = rng.normal(size=out_shape)

    def objective(tape, leaves):
        return weighted_sum(build(leaves), weights)

    errors = finite_diff_check(objective, params, h=1e-5)
    assert max(errors.values()) < TOLERANCE, errors


def test_gather_pick_log_gradients():
    rng = np.random.default_rng(3)
    indices = np.array([[0, 2], [2, 1]])
    picks = np.array([1, 0, 2])
    params = {"table": rng.normal(size=(3, 4)), "logits": rng.normal(size=(3, 3)), "pos": rng.uniform(0.5, 2.0, size=4)}

    def objective(tape, p):
        gathered = ad.sum_(ad.mul(ad.gather(p["table"], indices), rng_weights))
        picked = ad.sum_(ad.pick(ad.log_softmax(p["logits"]), picks))
        return ad.add(ad.add(gathered, picked), ad.sum_(ad.log(p["pos"])))

    rng_weights = rng.normal(size=(2, 2, 4))
    errors = finite_diff_check(objective, params)
    assert max(errors.values()) < TOLERANCE, errors


def test_finite_diff_check_quadratic_and_kink():
    def square(tape, p):
        return ad.sum_(ad.mul(p["w"], p["w"]))

    assert finite_diff_check(square, {"w": np.array([3.0])})["w"] < 1e-8

    def kink(tape, p):
        return ad.sum_(ad.absolute(p["w"]))

    assert finite_diff_check(kink, {"w": np.array([0.0])})["w"] > TOLERANCE


def test_finite_diff_check_skips_coordinates():
    def kink(tape, p):
        return ad.sum_(ad.absolute(p["w"]))

    errors = finite_diff_check(kink, {"w": np.array([0.0, 2.0])}, skip={"w": lambda index: index[0] == 0})
    assert errors["w"] < 1e-8


def test_dropout_is_identity_outside_training():
    x = Tensor(np.ones((4, 4)))
    assert ad.dropout(x, 0.5, None, training=False) is x
    assert ad.dropout(x, 0.0, None, training=True) is x
    dropped = ad.dropout(x, 0.5, np.random.default_rng(0), training=True).value
    assert set(np.unique(dropped)) <= {0.0, 2.0}
    with pytest.raises(NumericError):
        ad.dropout(x, 0.5, None, training=True)


def test_adam_first_step():
    params = {"w": np.array([0.0])}
    state = AdamState.initialize(params)
    updated, state = adam_step(params, {"w": np.array([1.0])}, state, lr=0.001)
    assert math.isclose(float(updated["w"][0]), -0.001, rel_tol=1e-6)
    assert state.step == 1
    assert params["w"][0] == 0.0


def test_adam_zero_gradient_leaves_params():
    params = {"w": np.array([1.5, -2.0])}
    state = AdamState.initialize(params)
    updated, state = adam_step(params, {"w": np.zeros(2)}, state, lr=0.01)
    assert np.array_equal(updated["w"], params["w"])
    assert state.step == 1


def test_adam_rejects_mismatched_names():
    params = {"w": np.zeros(2)}
    with pytest.raises(ShapeError):
        adam_step(params, {"v": np.zeros(2)}, AdamState.initialize(params), lr=0.1)


def test_adam_minimizes_quadratic():
    params = {"w": np.array([2.0, -3.0])}
    state = AdamState.initialize(params)

    def objective(tape, p):
        return ad.sum_(ad.mul(p["w"], p["w"]))

    for _ in range(500):
        _, grads = gradients(objective, params)
        params, state = adam_step(params, grads, state, lr=0.05)
    assert np.all(np.abs(params["w"]) < 0.1)


def test_checkpoint_round_trip(tmp_path):
    config = ModelConfig(dim=8, heads=2, fusion_heads=2, layers=1, num_apps=6, num_categories=2)
    params = init_params(config, np.random.default_rng(0))
    path = save_checkpoint(params, config, tmp_path / "model")
    assert path.suffix == ".npz"

    loaded, loaded_config = load_checkpoint(path)
    assert loaded_config == config
    assert set(loaded) == set(params)
    for name in params:
        assert np.array_equal(loaded[name], params[name])
    assert load_model(path).config.num_apps == 6


def test_checkpoint_rejects_foreign_archives(tmp_path):
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "missing.npz")
    foreign = tmp_path / "foreign.npz"
    np.savez(foreign, weights=np.ones(3))
    with pytest.raises(ConfigurationError) as info:
        load_checkpoint(foreign)
    assert FORMAT_TAG in str(info.value)
