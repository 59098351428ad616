"""Contractive autoencoder that embeds obstacle point clouds into a latent vector."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from neuroplan.errors import ContractError, FormatError
from neuroplan.geometry import CLOUD_SIZE, REGION_HALF
from neuroplan.neural import (
    DETERMINISTIC, TRAIN, AdagradState, MlpModel, adagrad_step, backward, forward, init_mlp,
    load_models, save_models,
)

log = logging.getLogger(__name__)

_ARCH = {2: ((512, 256, 128), 28), 3: ((786, 512, 256), 60)}


@dataclass(frozen=True)
class CaeSpec:
    dim: int = 2
    lam: float = 1e-3
    cloud_size: int = CLOUD_SIZE

    def __post_init__(self):
        if self.dim not in _ARCH:
            raise ContractError("CAE is defined for 2D and 3D clouds only")
        if self.lam <= 0:
            raise ContractError("lambda must be positive")

    @property
    def input_size(self) -> int:
        return self.cloud_size * self.dim

    @property
    def encoder_hidden(self) -> tuple[int, ...]:
        return _ARCH[self.dim][0]

    @property
    def latent_size(self) -> int:
        return _ARCH[self.dim][1]


def build_cae(spec: CaeSpec, rng: np.random.Generator) -> tuple[MlpModel, MlpModel]:
    meta = {"input_scale": REGION_HALF, "dim": spec.dim, "lambda": spec.lam}
    enc_sizes = [spec.input_size, *spec.encoder_hidden, spec.latent_size]
    enc = init_mlp(enc_sizes, rng, meta={**meta, "role": "encoder"})
    dec = init_mlp(enc_sizes[::-1], rng, meta={**meta, "role": "decoder"})
    return enc, dec


def _flatten(clouds, enc: MlpModel) -> np.ndarray:
    clouds = np.asarray(clouds, dtype=np.float64)
    scale = enc.meta.get("input_scale", 1.0)
    flat = clouds.reshape(clouds.shape[0], -1) if clouds.ndim == 3 else clouds
    if flat.shape[1] != enc.in_size:
        raise ContractError(f"cloud of {flat.shape[1]} values, encoder expects {enc.in_size}")
    return flat / scale


def encode(enc: MlpModel, pc) -> np.ndarray:
    """Latent embedding of one cloud (n x dim) or of a batch of clouds."""
    pc = np.asarray(pc, dtype=np.float64)
    single = pc.ndim == 2 and pc.size == enc.in_size
    x = _flatten(pc[None] if single else pc, enc)
    z = forward(enc.with_mode(DETERMINISTIC), x)
    return z[0] if single else z


def reconstruct(enc: MlpModel, dec: MlpModel, clouds) -> np.ndarray:
    """Decoder output in normalized units, one row per cloud."""
    x = _flatten(clouds, enc)
    return forward(dec.with_mode(DETERMINISTIC), forward(enc.with_mode(DETERMINISTIC), x))


def encoder_penalty(enc: MlpModel) -> float:
    return float(sum(np.sum(l.weights**2) for l in enc.layers))


def cae_loss(enc: MlpModel, dec: MlpModel, clouds, lam: float) -> float:
    """Mean squared reconstruction norm plus lam * sum of squared encoder weights."""
    x = _flatten(clouds, enc)
    if len(x) == 0:
        raise ContractError("empty batch")
    xr = forward(dec.with_mode(DETERMINISTIC), forward(enc.with_mode(DETERMINISTIC), x))
    return float(np.sum((xr - x) ** 2) / len(x) + lam * encoder_penalty(enc))


def cae_loss_and_grads(enc: MlpModel, dec: MlpModel, x: np.ndarray, lam: float):
    """Loss and gradients for a batch of already-normalized flat clouds."""
    z, ce = forward(enc, x, return_cache=True)
    xr, cd = forward(dec, z, return_cache=True)
    diff = xr - x
    n = len(x)
    loss = float(np.sum(diff**2) / n + lam * encoder_penalty(enc))
    gd = backward(dec, cd, 2.0 * diff / n)
    ge = backward(enc, ce, gd.inputs)
    for w, layer in zip(ge.weights, enc.layers):
        w += 2.0 * lam * layer.weights
    return loss, ge, gd


def train_cae(spec: CaeSpec, clouds, epochs: int = 500, batch_size: int = 128, seed: int = 0,
              lr: float = 1e-3, patience: int = 20, min_improvement: float = 1e-3):
    """Minimise the CAE loss with Adagrad; returns (encoder, decoder, loss_curve).

    ``loss_curve[e]`` is the mean minibatch loss of epoch ``e``. Training stops
    early when the best loss improved by less than ``min_improvement``
    (relative) over the last ``patience`` epochs.
    """
    clouds = np.asarray(clouds, dtype=np.float64)
    if len(clouds) < 2:
        raise ContractError("CAE training needs at least two clouds")
    rng = np.random.default_rng(seed)
    enc, dec = build_cae(spec, rng)
    x_all = _flatten(clouds, enc)
    enc.mode = dec.mode = TRAIN
    params = enc.params() + dec.params()
    st = AdagradState.for_params(params, learning_rate=lr)
    log.info("train_cae dim=%d clouds=%d lambda=%g lr=%g batch=%d epochs=%d seed=%d",
             spec.dim, len(x_all), spec.lam, lr, batch_size, epochs, seed)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(x_all))
        total = 0.0
        for s in range(0, len(order), batch_size):
            idx = order[s: s + batch_size]
            loss, ge, gd = cae_loss_and_grads(enc, dec, x_all[idx], spec.lam)
            adagrad_step(params, ge.as_list() + gd.as_list(), st)
            total += loss * len(idx)
        curve.append(total / len(order))
        if not np.isfinite(curve[-1]):
            log.warning("CAE loss diverged at epoch %d", epoch)
            break
        if _plateaued(curve, patience, min_improvement):
            log.info("CAE early stop at epoch %d", epoch)
            break
        log.debug("epoch %d loss %.6g", epoch, curve[-1])
    enc.mode = dec.mode = DETERMINISTIC
    enc.round_to_float32()
    dec.round_to_float32()
    return enc, dec, np.array(curve)


def _plateaued(curve, patience, min_improvement) -> bool:
    if patience <= 0 or len(curve) <= patience:
        return False
    before = min(curve[:-patience])
    recent = min(curve[-patience:])
    return recent > before * (1.0 - min_improvement)


def save_cae(path, enc: MlpModel, dec: MlpModel) -> None:
    save_models(path, {"encoder": enc, "decoder": dec})


def load_cae(path) -> tuple[MlpModel, MlpModel | None]:
    models = load_models(path)
    if "encoder" not in models:
        raise FormatError(f"{path}: no encoder network in file")
    return models["encoder"], models.get("decoder")
