import logging

import numpy as np
import pytest

from neuroplan.cae import (
    CaeSpec, build_cae, cae_loss, encode, encoder_penalty, load_cae, reconstruct, save_cae,
    train_cae,
)
from neuroplan.datagen import generate_workspace
from neuroplan.errors import ContractError, FormatError
from neuroplan.geometry import sample_point_cloud
from neuroplan.neural import LinearLayer, MlpModel, save_model


def np_mlp(m, x):
    """Plain re-implementation of the deterministic forward pass."""
    h = x
    for i, layer in enumerate(m.layers):
        h = h @ layer.weights.T + layer.bias
        if i < len(m.layers) - 1:
            h = np.maximum(h, 0) + m.prelu_slopes[i] * np.minimum(h, 0)
    return h


def small_clouds(n, size=40, scenario="s2D"):
    return np.array([sample_point_cloud(generate_workspace(scenario, 500 + s), size, seed=s)
                     for s in range(n)])


def test_latent_sizes_match_architecture():
    rng = np.random.default_rng(0)
    enc2, dec2 = build_cae(CaeSpec(2), rng)
    enc3, _ = build_cae(CaeSpec(3), rng)
    assert enc2.sizes == [2800, 512, 256, 128, 28]
    assert dec2.sizes == [28, 128, 256, 512, 2800]
    assert enc3.sizes == [4200, 786, 512, 256, 60]
    c2 = sample_point_cloud(generate_workspace("s2D", 1), seed=0)
    c3 = sample_point_cloud(generate_workspace("c3D", 1), seed=0)
    assert encode(enc2, c2).shape == (28,)
    assert encode(enc3, c3).shape == (60,)
    assert np.array_equal(encode(enc2, c2), encode(enc2, c2))
    assert encode(enc2, np.stack([c2, c2])).shape == (2, 28)


def test_size_mismatch_raises():
    enc, _ = build_cae(CaeSpec(2), np.random.default_rng(0))
    with pytest.raises(ContractError):
        encode(enc, np.zeros((1399, 2)))
    with pytest.raises(ContractError):
        CaeSpec(4)
    with pytest.raises(ContractError):
        CaeSpec(2, lam=0.0)


def test_perfect_autoencoder_has_zero_loss():
    eye = MlpModel([LinearLayer(np.eye(6), np.zeros(6))], np.zeros(0), [],
                   meta={"input_scale": 20})
    clouds = np.random.default_rng(1).uniform(-20, 20, (5, 3, 2))
    assert cae_loss(eye, eye, clouds, lam=0.0) == 0.0


def test_zero_weight_encoder_loss():
    spec = CaeSpec(2, cloud_size=40)
    enc, dec = build_cae(spec, np.random.default_rng(2))
    for layer in enc.layers:
        layer.weights[:] = 0
    clouds = small_clouds(4)
    x = clouds.reshape(4, -1) / 20
    const = np_mlp(dec, np_mlp(enc, np.zeros((1, 80))))
    expect = np.sum((const - x) ** 2) / 4
    assert cae_loss(enc, dec, clouds, lam=1e-3) == pytest.approx(expect, rel=1e-12)


def test_lambda_term_is_exact():
    spec = CaeSpec(2, cloud_size=40)
    enc, dec = build_cae(spec, np.random.default_rng(3))
    clouds = small_clouds(3)
    lam = 1e-3
    sq = sum(np.sum(l.weights ** 2) for l in enc.layers)
    assert encoder_penalty(enc) == pytest.approx(sq, rel=1e-12)
    diff = cae_loss(enc, dec, clouds, 2 * lam) - cae_loss(enc, dec, clouds, lam)
    assert diff == pytest.approx(lam * sq, rel=1e-9)


def test_training_improves_is_deterministic_and_logs(caplog):
    spec = CaeSpec(2, cloud_size=40)
    clouds = small_clouds(24)
    with caplog.at_level(logging.INFO, logger="neuroplan.cae"):
        enc, dec, curve = train_cae(spec, clouds, epochs=40, batch_size=8, seed=5)
    assert "lambda=0.001" in caplog.text
    assert "lr=0.001" in caplog.text
    assert np.all(np.isfinite(curve))
    assert curve[-1] < 0.5 * curve[0]
    _, _, again = train_cae(spec, clouds, epochs=40, batch_size=8, seed=5)
    assert np.array_equal(curve, again)
    assert reconstruct(enc, dec, clouds).shape == (24, 80)


def test_training_needs_two_clouds():
    with pytest.raises(ContractError):
        train_cae(CaeSpec(2, cloud_size=40), small_clouds(1), epochs=1)


def test_save_load_round_trip(tmp_path):
    spec = CaeSpec(2, cloud_size=40)
    enc, dec, _ = train_cae(spec, small_clouds(4), epochs=1, batch_size=4)
    save_cae(tmp_path / "cae.bin", enc, dec)
    enc2, dec2 = load_cae(tmp_path / "cae.bin")
    for a, b in zip(enc.params() + dec.params(), enc2.params() + dec2.params()):
        assert np.array_equal(a, b)
    assert enc2.meta["lambda"] == 1e-3
    save_model(tmp_path / "other.bin", dec)
    with pytest.raises(FormatError):
        load_cae(tmp_path / "other.bin")
