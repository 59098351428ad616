"""DeepSampler: a dropout MLP proposing the next configuration toward the goal."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from neuroplan.errors import ContractError, FormatError
from neuroplan.geometry import REGION_HALF
from neuroplan.neural import (
    DETERMINISTIC, STOCHASTIC, TRAIN, AdagradState, MlpModel, adagrad_step, backward, forward,
    init_mlp, load_model, save_model,
)

log = logging.getLogger(__name__)

HIDDEN = (1280, 1024, 896, 768, 512, 384, 256, 128, 64, 64, 32)


@dataclass(frozen=True)
class SamplerSpec:
    config_dim: int = 2
    latent_size: int = 28
    hidden: tuple[int, ...] = HIDDEN
    p: float = 0.5
    residual: bool = True
    output_scale: float = 1.0
    latent_gain: float = 0.5

    def __post_init__(self):
        if self.latent_size not in (0, 28, 60):
            raise ContractError("latent size must be 0, 28 or 60")
        if len(self.hidden) != 11:
            raise ContractError("the sampler has exactly eleven hidden layers")

    @property
    def input_size(self) -> int:
        return self.latent_size + 2 * self.config_dim

    @property
    def sizes(self) -> list[int]:
        return [self.input_size, *self.hidden, self.config_dim]


def build_sampler(spec: SamplerSpec, rng: np.random.Generator) -> MlpModel:
    # dropout after hidden layers 1-10; the last hidden layer has none
    flags = [True] * (len(spec.hidden) - 1) + [False]
    # residual models predict (x_{t+1} - x_t) / output_scale; absolute ones x_{t+1} / 20
    out_scale = spec.output_scale if spec.residual else REGION_HALF
    meta = {"input_scale": REGION_HALF, "latent_size": spec.latent_size,
            "config_dim": spec.config_dim, "role": "sampler",
            "residual": spec.residual, "output_scale": out_scale}
    return init_mlp(spec.sizes, rng, dropout=flags, p=spec.p, meta=meta)


def _scale(m: MlpModel) -> float:
    return float(m.meta.get("input_scale", 1.0))


def _out_scale(m: MlpModel) -> float:
    return float(m.meta.get("output_scale", _scale(m)))


def _lat(m: MlpModel) -> int:
    return int(m.meta.get("latent_size", 0))


def decode_output(m: MlpModel, inputs: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Network output -> configuration, given the raw (unnormalized) inputs."""
    y = out * _out_scale(m)
    if m.meta.get("residual", False):
        d = y.shape[-1]
        y = y + inputs[..., _lat(m): _lat(m) + d]
    return y


def encode_targets(m: MlpModel, inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Inverse of decode_output: what the network should emit for ``targets``."""
    t = np.asarray(targets, dtype=np.float64)
    if m.meta.get("residual", False):
        d = t.shape[-1]
        t = t - inputs[..., _lat(m): _lat(m) + d]
    return t / _out_scale(m)


def normalize_inputs(m: MlpModel, inputs: np.ndarray) -> np.ndarray:
    """Scale the configuration columns (after the latent block) into [-1, 1].

    When the model carries latent statistics, the latent block is
    standardized and multiplied by ``latent_gain`` so it does not swamp the
    configuration inputs.
    """
    lat = _lat(m)
    out = np.array(inputs, dtype=np.float64)
    out[..., lat:] /= _scale(m)
    if lat and "latent_mean" in m.meta:
        mu = np.asarray(m.meta["latent_mean"])
        sd = np.asarray(m.meta["latent_std"])
        out[..., :lat] = (out[..., :lat] - mu) / sd * float(m.meta.get("latent_gain", 1.0))
    return out


def fit_latent_stats(m: MlpModel, inputs: np.ndarray, gain: float) -> None:
    """Record the latent mean/std of the training inputs in the model metadata."""
    lat = _lat(m)
    if not lat:
        return
    z = np.asarray(inputs, dtype=np.float64)[:, :lat]
    m.meta["latent_mean"] = [float(v) for v in z.mean(axis=0)]
    m.meta["latent_std"] = [float(v) for v in np.maximum(z.std(axis=0), 1e-6)]
    m.meta["latent_gain"] = float(gain)


def next_sample(m: MlpModel, z, x_t, x_T, rng: np.random.Generator | None = None,
                bound: float = REGION_HALF) -> np.ndarray:
    """Propose x_{t+1} from (Z, x_t, x_T); dropout stays on unless ``m`` is deterministic."""
    x_t = np.asarray(x_t, dtype=np.float64)
    x_T = np.asarray(x_T, dtype=np.float64)
    z = np.zeros(0) if z is None else np.asarray(z, dtype=np.float64)
    d = int(m.meta.get("config_dim", m.out_size))
    if x_t.shape != (d,) or x_T.shape != (d,) or z.size + 2 * d != m.in_size:
        raise ContractError("sampler inputs do not match the model dimensions")
    raw = np.concatenate([z, x_t, x_T])
    y = decode_output(m, raw, forward(m, normalize_inputs(m, raw), rng))
    return np.clip(y, -bound, bound)


def frozen(m: MlpModel) -> MlpModel:
    """The model in the mode used for planning (dropout active)."""
    return m.with_mode(STOCHASTIC)


def mse(pred, target) -> float:
    """Sum over coordinates of the squared error, averaged over pairs."""
    pred = np.atleast_2d(pred)
    target = np.atleast_2d(target)
    if len(pred) == 0:
        raise ContractError("empty batch")
    return float(np.sum((pred - target) ** 2) / len(pred))


def sampler_loss(m: MlpModel, inputs, targets, rng=None) -> float:
    """Mean over pairs of the squared distance between predicted and expert next states.

    Measured in configuration units; training minimises the same quantity
    divided by ``output_scale`` squared.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    pred = decode_output(m, inputs, forward(m, normalize_inputs(m, inputs), rng))
    return mse(pred, targets)


def sampler_loss_and_grads(m: MlpModel, x: np.ndarray, y: np.ndarray, rng):
    pred, cache = forward(m, x, rng, return_cache=True)
    diff = pred - y
    loss = float(np.sum(diff**2, dtype=np.float64) / len(x))
    return loss, backward(m, cache, diff * (2.0 / len(x)))


@dataclass
class PairSet:
    inputs: np.ndarray  # (N, latent + 2d) raw units
    targets: np.ndarray  # (N, d)
    workspace: np.ndarray  # (N,) workspace id of each pair

    def __len__(self) -> int:
        return len(self.targets)


def make_training_pairs(paths, latents: dict) -> PairSet:
    """One pair per consecutive (x_t -> x_t+1), with x_T the path's last state.

    ``paths`` is an iterable of (workspace_id, configs); ``latents`` maps the
    workspace id to its Z (an empty vector for the environment-free case).
    """
    ins, outs, wss = [], [], []
    for ws_id, path in paths:
        path = np.asarray(path, dtype=np.float64)
        if len(path) < 2:
            log.warning("dropping path of length %d from workspace %s", len(path), ws_id)
            continue
        z = np.asarray(latents.get(ws_id, np.zeros(0)), dtype=np.float64)
        goal = path[-1]
        n = len(path) - 1
        ins.append(np.hstack([np.tile(z, (n, 1)), path[:-1], np.tile(goal, (n, 1))]))
        outs.append(path[1:])
        wss.append(np.full(n, ws_id))
    if not ins:
        return PairSet(np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0, dtype=np.int64))
    return PairSet(np.vstack(ins), np.vstack(outs), np.concatenate(wss))


def train_sampler(spec: SamplerSpec, pairs: PairSet, epochs: int = 200, batch_size: int = 256,
                  seed: int = 0, lr: float = 1e-3, patience: int = 20,
                  min_improvement: float = 1e-3, initial_accumulator: float = 0.0,
                  dtype=np.float32, dropout_warmup: int = 5):
    """Minimise the pair MSE with Adagrad and dropout active; returns (model, curve).

    ``curve[0]`` is the untrained model's loss over the whole set (dropout at
    ``spec.p``); ``curve[e + 1]`` is the mean minibatch loss of epoch ``e``.

    The dropout rate ramps linearly from 0 to ``spec.p`` over the first
    ``dropout_warmup`` epochs; a deep net trained at p=0.5 from scratch tends
    to collapse to the mean step. Training arithmetic runs in ``dtype``
    (float32 by default, which halves the cost); the returned model is
    float64 holding float32-exact values.
    """
    if len(pairs) == 0:
        raise ContractError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    m = build_sampler(spec, rng).astype(dtype)
    if pairs.inputs.shape[1] != m.in_size:
        raise ContractError(f"pairs have {pairs.inputs.shape[1]} inputs, model expects {m.in_size}")
    fit_latent_stats(m, pairs.inputs, spec.latent_gain)
    x_all = normalize_inputs(m, pairs.inputs).astype(dtype)
    y_all = encode_targets(m, pairs.inputs, pairs.targets).astype(dtype)
    m.mode = TRAIN
    params = m.params()
    st = AdagradState.for_params(params, lr, initial_accumulator=initial_accumulator)
    log.info("train_sampler pairs=%d lr=%g p=%g warmup=%d batch=%d epochs=%d seed=%d dtype=%s",
             len(x_all), lr, spec.p, dropout_warmup, batch_size, epochs, seed,
             np.dtype(dtype).name)
    curve = [_dataset_loss(m, x_all, y_all, batch_size, rng)]
    for epoch in range(epochs):
        m.p = spec.p * min(1.0, epoch / dropout_warmup) if dropout_warmup > 0 else spec.p
        order = rng.permutation(len(x_all))
        total = 0.0
        for s in range(0, len(order), batch_size):
            idx = order[s: s + batch_size]
            loss, g = sampler_loss_and_grads(m, x_all[idx], y_all[idx], rng)
            adagrad_step(params, g.as_list(), st)
            total += loss * len(idx)
        curve.append(total / len(order))
        log.debug("epoch %d loss %.6g", epoch, curve[-1])
        if not np.isfinite(curve[-1]):
            log.warning("sampler loss diverged at epoch %d", epoch)
            break
        if patience > 0 and epoch >= dropout_warmup + patience:
            settled = curve[1 + dropout_warmup: -patience]
            if min(curve[-patience:]) > min(settled) * (1.0 - min_improvement):
                log.info("sampler early stop at epoch %d", epoch)
                break
    m.p = spec.p
    m = m.astype(np.float32).astype(np.float64)
    m.mode = DETERMINISTIC
    return m, np.array(curve)


def _dataset_loss(m: MlpModel, x, y, batch_size: int, rng) -> float:
    total = 0.0
    for s in range(0, len(x), batch_size):
        pred = forward(m, x[s: s + batch_size], rng)
        total += float(np.sum((pred - y[s: s + batch_size]) ** 2, dtype=np.float64))
    return total / len(x)


save_sampler = save_model


def load_sampler(path) -> MlpModel:
    m = load_model(path)
    if m.meta.get("role") != "sampler":
        raise FormatError(f"{path}: not a sampler model")
    return m
