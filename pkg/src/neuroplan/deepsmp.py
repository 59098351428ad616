"""Neural-then-uniform sampling for RRT* (DeepSMP), uni- and bidirectional."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from neuroplan.cae import encode
from neuroplan.errors import ConfigurationError, ContractError
from neuroplan.neural import MlpModel
from neuroplan.sampler import frozen, next_sample
from neuroplan.smp import (
    NEURAL, PlannerParams, PlanResult, Problem, UniformSampler, plan, sampler_streams,
)


@dataclass
class DeepSmpConfig:
    encoder: MlpModel | None
    sampler: MlpModel | None
    params: PlannerParams
    n_limit: int = 0
    uniform_tail: bool = True

    def __post_init__(self):
        n = self.params.max_iterations
        if self.n_limit < 0:
            raise ContractError("n_limit must be non-negative")
        if n > 0 and self.n_limit >= n:
            raise ContractError(f"n_limit ({self.n_limit}) must stay below n ({n})")

    @property
    def n(self) -> int:
        return self.params.max_iterations


def compute_n_limit(paths) -> int:
    """Node count of the longest training path."""
    lengths = [len(p) for p in paths]
    if not lengths:
        raise ContractError("cannot derive n_limit from an empty dataset")
    return int(max(lengths))


def default_n_limit(paths, n: int) -> int:
    """compute_n_limit, kept to at most half the iteration budget."""
    return min(compute_n_limit(paths), n // 2)


class HybridSource:
    """Pre-generated neural samples for the first n_limit iterations, uniform after."""

    kind = "deepsmp"

    def __init__(self, neural: np.ndarray, uniform: UniformSampler | None, record: bool = True):
        self.neural = neural
        self.uniform = uniform
        self.pos = 0
        self.trace = [] if record else None
        if uniform is not None:
            uniform.trace = self.trace

    def peek(self, k: int, tree=None):
        left = len(self.neural) - self.pos
        if left > 0:
            return self.neural[self.pos: self.pos + min(k, left)]
        if self.uniform is None:
            return np.zeros((0, self.neural.shape[1]))
        return self.uniform.peek(k)

    def advance(self, m: int) -> None:
        left = len(self.neural) - self.pos
        if left > 0:
            if m > left:
                raise ContractError("cannot advance across the phase boundary in one block")
            self.pos += m
            if self.trace is not None:
                self.trace.extend([NEURAL] * m)
        else:
            self.uniform.advance(m)

    def draw(self, tree=None):
        x = self.peek(1)[0].copy()
        self.advance(1)
        return x


def neural_chain(model: MlpModel, z, x_init, x_goal, count: int, rng: np.random.Generator,
                 goal_radius: float, bidirectional: bool = False) -> np.ndarray:
    """The sequence of neural samples fed to the planner.

    Each output becomes the next input state; when a sample lands inside the
    goal ball the chain restarts from its start state. The bidirectional
    variant alternates two chains, start->goal and goal->start.
    """
    x_init = np.asarray(x_init, dtype=np.float64)
    x_goal = np.asarray(x_goal, dtype=np.float64)
    streams = [[x_init, x_goal, x_init.copy()]]
    if bidirectional:
        streams.append([x_goal, x_init, x_goal.copy()])
    out = np.zeros((count, len(x_init)))
    for i in range(count):
        s = streams[i % len(streams)]
        start, target, cur = s
        x = next_sample(model, z, cur, target, rng)
        out[i] = x
        s[2] = start if np.linalg.norm(x - target) <= goal_radius else x
    return out


def _check(problem: Problem, cfg: DeepSmpConfig, cloud):
    if cfg.n_limit > 0:
        if cfg.sampler is None:
            raise ConfigurationError("DeepSMP needs a trained sampler model")
        latent = int(cfg.sampler.meta.get("latent_size", 0))
        if latent:
            if cfg.encoder is None:
                raise ConfigurationError("DeepSMP needs an obstacle encoder")
            if cloud is None:
                raise ConfigurationError("DeepSMP needs the workspace point cloud")
        if int(cfg.sampler.meta.get("config_dim", cfg.sampler.out_size)) != problem.rm.config_dim:
            raise ConfigurationError("sampler was trained for a different robot")


def _run(problem: Problem, cfg: DeepSmpConfig, cloud, seed: int, bidirectional: bool,
         stop_cost: float | None) -> PlanResult:
    _check(problem, cfg, cloud)
    params = cfg.params.with_(seed=seed)
    uni_rng, nn_rng = sampler_streams(seed)
    neural = np.zeros((0, problem.rm.config_dim))
    if cfg.n_limit > 0:
        model = frozen(cfg.sampler)
        latent = int(model.meta.get("latent_size", 0))
        z = encode(cfg.encoder, cloud) if latent else np.zeros(0)
        neural = neural_chain(model, z, problem.x_init, problem.x_goal, cfg.n_limit, nn_rng,
                              params.goal_radius, bidirectional)
    uniform = None
    if cfg.uniform_tail:
        uniform = UniformSampler(problem.rm, problem.x_goal, uni_rng, params.goal_bias)
    else:
        params = params.with_(max_iterations=cfg.n_limit)
    source = HybridSource(neural, uniform)
    res = plan(problem, source, params, stop_cost)
    res.sampler_kind = "deepsmp-bi" if bidirectional else "deepsmp"
    return res


def deepsmp_plan(problem: Problem, cfg: DeepSmpConfig, cloud=None, seed: int = 0,
                 stop_cost: float | None = None) -> PlanResult:
    return _run(problem, cfg, cloud, seed, False, stop_cost)


def deepsmp_plan_bidirectional(problem: Problem, cfg: DeepSmpConfig, cloud=None, seed: int = 0,
                               stop_cost: float | None = None) -> PlanResult:
    return _run(problem, cfg, cloud, seed, True, stop_cost)
