"""A small dense-network engine: linear layers, PReLU, dropout, backprop, Adagrad.

Networks are stacks of hidden blocks ``linear -> PReLU -> [dropout]`` followed
by a plain linear output layer. Rows of the input matrix are samples.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from neuroplan.errors import ContractError, FormatError, VersionError

TRAIN = "train"
STOCHASTIC = "eval-stochastic"
DETERMINISTIC = "eval-deterministic"
MODES = (TRAIN, STOCHASTIC, DETERMINISTIC)

PRELU_INIT = 0.25


@dataclass
class LinearLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape


@dataclass
class MlpModel:
    layers: list[LinearLayer]
    prelu_slopes: np.ndarray  # one per hidden layer
    dropout: list[bool]  # one flag per hidden layer
    p: float = 0.5
    mode: str = DETERMINISTIC
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ContractError("a model needs at least one layer")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.weights.shape[0] != b.weights.shape[1]:
                raise ContractError(f"layer shapes {a.shape} -> {b.shape} do not compose")
        nh = len(self.layers) - 1
        self.prelu_slopes = np.asarray(self.prelu_slopes, dtype=self.layers[0].weights.dtype)
        if self.prelu_slopes.shape != (nh,) or len(self.dropout) != nh:
            raise ContractError("need one PReLU slope and one dropout flag per hidden layer")
        if not 0.0 <= self.p <= 1.0:
            raise ContractError("dropout rate must lie in [0, 1]")
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}")

    @property
    def in_size(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def out_size(self) -> int:
        return self.layers[-1].weights.shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.in_size] + [l.weights.shape[0] for l in self.layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        out.append(self.prelu_slopes)
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> MlpModel:
        return MlpModel(
            [LinearLayer(l.weights.copy(), l.bias.copy()) for l in self.layers],
            self.prelu_slopes.copy(), list(self.dropout), self.p, self.mode, dict(self.meta),
        )

    def with_mode(self, mode: str) -> MlpModel:
        m = MlpModel(self.layers, self.prelu_slopes, self.dropout, self.p, mode, self.meta)
        return m

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0].weights.dtype

    def astype(self, dtype) -> MlpModel:
        """Copy with all parameters cast to ``dtype``."""
        layers = [LinearLayer(l.weights.astype(dtype), l.bias.astype(dtype)) for l in self.layers]
        m = MlpModel(layers, self.prelu_slopes, list(self.dropout), self.p, self.mode,
                     dict(self.meta))
        m.prelu_slopes = self.prelu_slopes.astype(dtype)
        return m

    def round_to_float32(self) -> None:
        """Snap parameters to the precision they are stored with."""
        for p in self.params():
            p[...] = p.astype(np.float32).astype(np.float64)


def init_mlp(sizes, rng: np.random.Generator, dropout=None, p: float = 0.5,
             mode: str = DETERMINISTIC, meta=None) -> MlpModel:
    """Weights and biases uniform in +-1/sqrt(fan_in); PReLU slopes 0.25."""
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append(LinearLayer(rng.uniform(-bound, bound, (fan_out, fan_in)),
                                  rng.uniform(-bound, bound, fan_out)))
    nh = len(layers) - 1
    if dropout is None:
        dropout = [False] * nh
    return MlpModel(layers, np.full(nh, PRELU_INIT), list(dropout), p, mode, dict(meta or {}))


@dataclass
class Cache:
    inputs: list  # input to each linear layer
    pre: list  # pre-activation of each hidden layer
    masks: list  # scaled dropout mask or None per hidden layer
    model_id: int


def forward(m: MlpModel, x, rng: np.random.Generator | None = None, return_cache: bool = False):
    """Run the network on a batch (rows) or a single vector.

    Dropout is active in ``train`` and ``eval-stochastic`` modes and uses the
    inverted convention, so ``eval-deterministic`` needs no rescaling.
    """
    dt = m.dtype
    x = np.asarray(x, dtype=dt)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != m.in_size:
        raise ContractError(f"input width {h.shape[1]} != model input {m.in_size}")
    use_dropout = m.mode != DETERMINISTIC
    if use_dropout and rng is None and any(m.dropout) and m.p > 0:
        raise ContractError("a random generator is required when dropout is active")
    keep = 1.0 - m.p
    inputs, pres, masks = [], [], []
    last = len(m.layers) - 1
    for i, layer in enumerate(m.layers):
        inputs.append(h)
        z = h @ layer.weights.T + layer.bias
        if i == last:
            h = z
            break
        pres.append(z)
        a = m.prelu_slopes[i]
        h = np.where(z > 0, z, a * z)
        mask = None
        if use_dropout and m.dropout[i] and m.p > 0:
            if keep <= 0:
                mask = np.zeros_like(h)
            else:
                mask = (rng.random(h.shape, dtype=dt) < keep).astype(dt) * dt.type(1.0 / keep)
            h = h * mask
        masks.append(mask)
    out = h[0] if single else h
    if return_cache:
        return out, Cache(inputs, pres, masks, id(m))
    return out


@dataclass
class Gradients:
    weights: list
    biases: list
    slopes: np.ndarray
    inputs: np.ndarray

    def as_list(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        out.append(self.slopes)
        return out


def backward(m: MlpModel, cache: Cache, loss_grad) -> Gradients:
    """Gradients of a scalar loss given d(loss)/d(output) for the cached batch."""
    if cache is None or cache.model_id != id(m) or len(cache.inputs) != len(m.layers):
        raise ContractError("stale or foreign activation cache")
    g = np.asarray(loss_grad, dtype=m.dtype)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != (cache.inputs[0].shape[0], m.out_size):
        raise ContractError("loss gradient shape does not match the cached batch")
    nl = len(m.layers)
    dW = [None] * nl
    db = [None] * nl
    dslopes = np.zeros(nl - 1, dtype=m.dtype)
    for i in range(nl - 1, -1, -1):
        layer = m.layers[i]
        dW[i] = g.T @ cache.inputs[i]
        db[i] = g.sum(axis=0)
        g = g @ layer.weights
        if i == 0:
            break
        # back through dropout and PReLU of hidden layer i-1
        j = i - 1
        if cache.masks[j] is not None:
            g = g * cache.masks[j]
        z = cache.pre[j]
        dslopes[j] = np.vdot(np.minimum(z, 0), g)
        a = m.prelu_slopes[j]
        scale = (z > 0).astype(g.dtype)
        scale *= 1 - a
        scale += a
        g = g * scale
    return Gradients(dW, db, dslopes, g)


@dataclass
class AdagradState:
    accumulators: list
    learning_rate: float = 0.1
    epsilon: float = 1e-10

    @classmethod
    def for_params(cls, params, learning_rate=0.1, epsilon=1e-10,
                   initial_accumulator: float = 0.0) -> AdagradState:
        return cls([np.full_like(p, initial_accumulator) for p in params], learning_rate, epsilon)


def adagrad_step(params: list[np.ndarray], grads: list[np.ndarray], st: AdagradState) -> None:
    """In-place Adagrad update: acc += g^2; p -= lr * g / (sqrt(acc) + eps)."""
    if len(params) != len(grads) or len(params) != len(st.accumulators):
        raise ContractError("parameter, gradient and accumulator lists differ in length")
    for p, g, acc in zip(params, grads, st.accumulators):
        if p.shape != g.shape or p.shape != acc.shape:
            raise ContractError(f"shape mismatch {p.shape} / {g.shape} / {acc.shape}")
        acc += g * g
        p -= st.learning_rate * g / (np.sqrt(acc) + st.epsilon)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

MAGIC = b"NPLNNET\x00"
FORMAT_VERSION = 1


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated model file")
        out = self.raw[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64)


def _encode_model(m: MlpModel) -> bytes:
    parts = []
    meta = json.dumps(m.meta, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(meta)) + meta)
    parts.append(struct.pack("<I", len(m.layers)))
    for layer in m.layers:
        out_n, in_n = layer.weights.shape
        parts.append(struct.pack("<II", in_n, out_n))
    parts.append(bytes(int(f) for f in m.dropout))
    parts.append(struct.pack("<f", m.p))
    parts.append(m.prelu_slopes.astype("<f4").tobytes())
    for layer in m.layers:
        parts.append(np.ascontiguousarray(layer.weights).astype("<f4").tobytes())
        parts.append(layer.bias.astype("<f4").tobytes())
    return b"".join(parts)


def _decode_model(r: _Reader) -> MlpModel:
    (mlen,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(mlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{r.path}: bad metadata block") from exc
    (nl,) = r.unpack("<I")
    if nl == 0 or nl > 1024:
        raise FormatError(f"{r.path}: implausible layer count {nl}")
    dims = [r.unpack("<II") for _ in range(nl)]
    dropout = [bool(b) for b in r.take(nl - 1)]
    (p,) = r.unpack("<f")
    slopes = r.floats(nl - 1)
    layers = []
    for in_n, out_n in dims:
        w = r.floats(in_n * out_n).reshape(out_n, in_n)
        b = r.floats(out_n)
        layers.append(LinearLayer(w, b))
    try:
        return MlpModel(layers, slopes, dropout, float(np.float32(p)), DETERMINISTIC, meta)
    except ContractError as exc:
        raise FormatError(f"{r.path}: {exc}") from exc


def save_models(path, models: dict[str, MlpModel]) -> None:
    """Write named networks to one versioned little-endian float32 file."""
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(models))]
    for name, m in models.items():
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(_encode_model(m))
    Path(path).write_bytes(b"".join(parts))


def load_models(path) -> dict[str, MlpModel]:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a model file")
    version, count = r.unpack("<HI")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        out[name] = _decode_model(r)
    if r.pos != len(raw):
        raise FormatError(f"{path}: trailing bytes after last model")
    return out


def save_model(path, m: MlpModel) -> None:
    save_models(path, {"model": m})


def load_model(path) -> MlpModel:
    models = load_models(path)
    if len(models) != 1:
        raise FormatError(f"{path}: expected a single network, found {sorted(models)}")
    return next(iter(models.values()))
