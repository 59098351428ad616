import struct

import numpy as np
import pytest

from neuroplan.errors import ContractError, FormatError, VersionError
from neuroplan.neural import (
    DETERMINISTIC, STOCHASTIC, TRAIN, AdagradState, LinearLayer, MlpModel, adagrad_step,
    backward, forward, init_mlp, load_model, load_models, save_model, save_models,
)
from oracles import cae_gradcheck, sampler_gradcheck


def test_zero_weights_give_zero_output():
    m = init_mlp([3, 4, 2], np.random.default_rng(0))
    for layer in m.layers:
        layer.weights[:] = 0
        layer.bias[:] = 0
    assert np.array_equal(forward(m, np.ones(3)), np.zeros(2))


def test_identity_layer():
    m = MlpModel([LinearLayer(np.eye(3), np.zeros(3))], np.zeros(0), [])
    x = np.array([1.5, 2.0, 0.25])
    assert np.array_equal(forward(m, x), x)


def test_shapes_validated():
    with pytest.raises(ContractError):
        MlpModel([LinearLayer(np.eye(3), np.zeros(3)), LinearLayer(np.eye(2), np.zeros(2))],
                 np.zeros(1), [False])
    m = init_mlp([3, 4, 2], np.random.default_rng(0))
    with pytest.raises(ContractError):
        forward(m, np.ones(4))
    with pytest.raises(ContractError):
        MlpModel(m.layers, m.prelu_slopes, m.dropout, p=1.5)


def test_prelu_negative_side():
    m = MlpModel([LinearLayer(np.eye(2), np.zeros(2)), LinearLayer(np.eye(2), np.zeros(2))],
                 np.array([0.25]), [False])
    assert np.allclose(forward(m, np.array([-4.0, 3.0])), [-1.0, 3.0])


def test_stochastic_mode_reproducible_with_same_seed():
    m = init_mlp([4, 16, 16, 2], np.random.default_rng(1), dropout=[True, True], mode=STOCHASTIC)
    x = np.ones(4)
    a = forward(m, x, np.random.default_rng(5))
    b = forward(m, x, np.random.default_rng(5))
    c = forward(m, x, np.random.default_rng(6))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    with pytest.raises(ContractError):
        forward(m, x)


def test_deterministic_mode_is_pure_and_consumes_no_rng():
    m = init_mlp([4, 8, 2], np.random.default_rng(1), dropout=[True])
    rng = np.random.default_rng(3)
    state = rng.bit_generator.state
    assert np.array_equal(forward(m, np.ones(4), rng), forward(m, np.ones(4), rng))
    assert rng.bit_generator.state == state


def test_dropout_survival_frequency():
    m = MlpModel([LinearLayer(np.eye(8), np.ones(8)), LinearLayer(np.eye(8), np.zeros(8))],
                 np.array([0.25]), [True], p=0.5, mode=TRAIN)
    x = np.ones((10_000, 8))
    out = forward(m, x, np.random.default_rng(0))
    survived = (out != 0).mean(axis=0)
    assert np.all((survived >= 0.48) & (survived <= 0.52))
    # inverted dropout: survivors are scaled by 1 / (1 - p)
    assert set(np.unique(out)) == {0.0, 4.0}


@pytest.mark.parametrize("seed", range(10))
def test_sampler_loss_gradient_matches_finite_differences(seed):
    assert sampler_gradcheck(seed) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_cae_loss_gradient_matches_finite_differences(seed):
    assert cae_gradcheck(seed) < 1e-4


def test_zero_loss_gradient_gives_zero_gradients():
    rng = np.random.default_rng(2)
    m = init_mlp([3, 5, 2], rng, mode=TRAIN)
    _, cache = forward(m, rng.normal(size=(4, 3)), return_cache=True)
    g = backward(m, cache, np.zeros((4, 2)))
    assert all(np.count_nonzero(a) == 0 for a in g.as_list())


def test_single_layer_closed_form_gradient():
    rng = np.random.default_rng(3)
    m = MlpModel([LinearLayer(rng.normal(size=(2, 3)), rng.normal(size=2))], np.zeros(0), [])
    x, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    pred, cache = forward(m, x, return_cache=True)
    g = backward(m, cache, 2 * (pred - y) / len(x))
    w, b = m.layers[0].weights, m.layers[0].bias
    r = x @ w.T + b - y
    assert np.allclose(g.weights[0], 2 * r.T @ x / len(x), atol=1e-12)
    assert np.allclose(g.biases[0], 2 * r.sum(axis=0) / len(x), atol=1e-12)


def test_stale_cache_rejected():
    rng = np.random.default_rng(4)
    m = init_mlp([3, 4, 2], rng)
    other = init_mlp([3, 4, 2], rng)
    _, cache = forward(m, np.ones((1, 3)), return_cache=True)
    with pytest.raises(ContractError):
        backward(other, cache, np.ones((1, 2)))
    with pytest.raises(ContractError):
        backward(m, cache, np.ones((2, 2)))


def test_adagrad_hand_values():
    p = [np.zeros(1)]
    st = AdagradState.for_params(p, learning_rate=0.1, epsilon=1e-10)
    adagrad_step(p, [np.ones(1)], st)
    assert p[0][0] == pytest.approx(-0.1, rel=1e-9)
    adagrad_step(p, [np.ones(1)], st)
    assert p[0][0] == pytest.approx(-0.1 - 0.1 / np.sqrt(2), rel=1e-9)
    before = p[0].copy()
    adagrad_step(p, [np.zeros(1)], st)
    assert np.array_equal(p[0], before)
    assert np.all(st.accumulators[0] >= 0)
    with pytest.raises(ContractError):
        adagrad_step(p, [np.zeros(2)], st)


def _random_model(seed=0):
    m = init_mlp([5, 7, 3], np.random.default_rng(seed), dropout=[True], p=0.5,
                 meta={"role": "test", "scale": 20})
    m.round_to_float32()
    return m


def test_model_round_trip_bit_exact(tmp_path):
    m = _random_model()
    save_model(tmp_path / "m.bin", m)
    back = load_model(tmp_path / "m.bin")
    for a, b in zip(m.params(), back.params()):
        assert np.array_equal(a, b)
    assert back.dropout == m.dropout and back.p == m.p and back.meta == m.meta
    assert back.mode == DETERMINISTIC


def test_multi_model_file(tmp_path):
    save_models(tmp_path / "m.bin", {"a": _random_model(0), "b": _random_model(1)})
    assert sorted(load_models(tmp_path / "m.bin")) == ["a", "b"]
    with pytest.raises(FormatError):
        load_model(tmp_path / "m.bin")


def test_truncated_and_wrong_version_files(tmp_path):
    f = tmp_path / "m.bin"
    save_model(f, _random_model())
    raw = f.read_bytes()
    f.write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        load_model(f)
    bad = bytearray(raw)
    struct.pack_into("<H", bad, 8, 99)
    f.write_bytes(bytes(bad))
    with pytest.raises(VersionError):
        load_model(f)
    f.write_bytes(b"garbage!" + raw[8:])
    with pytest.raises(FormatError):
        load_model(f)
