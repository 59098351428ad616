"""RRT* with pluggable sample sources, and the Informed-RRT* baseline."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from neuroplan import _kernels as K
from neuroplan.errors import ContractError
from neuroplan.geometry import RobotModel, Workspace, as_config, is_config_free, path_cost

# sample-stream labels, also used by the phase instrumentation in deepsmp
UNIFORM = "uniform"
GOAL = "goal"
INFORMED = "informed"
NEURAL = "neural"

FIRST_SOLUTION = 1e300  # stop_cost that halts on the first solution


@dataclass(frozen=True)
class PlannerParams:
    step_size: float = 0.5
    gamma: float = 1.6
    goal_radius: float = 1.0
    max_iterations: int = 10_000
    resolution: float | None = None
    seed: int = 0
    k_r: float = 50.0
    goal_bias: float = 0.05

    def __post_init__(self):
        for name in ("step_size", "gamma", "goal_radius", "k_r"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.max_iterations < 0:
            raise ContractError("max_iterations must be non-negative")
        if not 0.0 <= self.goal_bias < 1.0:
            raise ContractError("goal_bias must lie in [0, 1)")

    def with_(self, **kw) -> PlannerParams:
        return replace(self, **kw)


# reference step sizes for full-scale runs; desk-scale runs use the 0.5 default
FULL_SCALE_POINT_PARAMS = PlannerParams(step_size=0.01)
FULL_SCALE_RIGID_PARAMS = PlannerParams(step_size=0.9)


@dataclass(frozen=True)
class Problem:
    x_init: np.ndarray
    x_goal: np.ndarray
    ws: Workspace
    rm: RobotModel = field(default_factory=RobotModel)


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def rrt_star_gamma(rm: RobotModel) -> float:
    """Smallest ball-radius constant for which RRT* is asymptotically optimal."""
    d = rm.config_dim
    vol = float(np.prod(2 * rm.config_bounds))
    return 2.0 * (1.0 + 1.0 / d) ** (1.0 / d) * (vol / unit_ball_volume(d)) ** (1.0 / d)


class Tree:
    """Array-backed RRT* tree with a uniform-grid spatial index."""

    def __init__(self, ws: Workspace, rm: RobotModel, root, goal, params: PlannerParams,
                 capacity: int):
        self.ws, self.rm, self.params = ws, rm, params
        d = rm.config_dim
        cap = max(int(capacity), 1)
        self.X = np.zeros((cap, d))
        self.parent = np.full(cap, -1, dtype=np.int64)
        self.cost = np.zeros(cap)
        self.child_head = np.full(cap, -1, dtype=np.int64)
        self.sibling = np.full(cap, -1, dtype=np.int64)
        self.node_next = np.full(cap, -1, dtype=np.int64)
        self.goal_nodes = np.zeros(cap, dtype=np.int64)
        self.near_buf = np.zeros(cap, dtype=np.int64)
        self.stack = np.zeros(cap, dtype=np.int64)

        bounds = rm.config_bounds
        per_axis = 64 if d == 2 else 24
        cell = float(2 * bounds.max() / per_axis)
        self.origin = -bounds.astype(np.float64)
        self.ncell = np.ceil(2 * bounds / cell).astype(np.int64)
        self.cell_head = np.full(int(np.prod(self.ncell)), -1, dtype=np.int64)
        self.goal = as_config(goal, rm).copy()

        self.meta = np.zeros(K.N_META, dtype=np.int64)
        self.fparams = np.zeros(K.N_FPARAMS)
        self.fparams[K.F_STEP] = params.step_size
        self.fparams[K.F_RADIUS_COEF] = params.gamma * rrt_star_gamma(rm)
        self.fparams[K.F_RADIUS_CAP] = params.k_r * params.step_size
        self.fparams[K.F_GOAL_RADIUS] = params.goal_radius
        self.fparams[K.F_RESOLUTION] = params.resolution or rm.default_resolution
        self.fparams[K.F_CELL] = cell
        self.fparams[K.F_BEST] = np.inf

        self._obs = (ws.lo, ws.hi, ws.bounds_array, rm.length / 2, rm.width / 2)
        root = as_config(root, rm)
        K.tree_insert(root, -1, 0.0, self.X, self.parent, self.cost, self.child_head,
                      self.sibling, self.cell_head, self.node_next, self.origin, self.ncell,
                      self.meta, self.fparams)
        if np.linalg.norm(root - self.goal) <= params.goal_radius:
            self.goal_nodes[0] = 0
            self.meta[K.M_NGOAL] = 1
            self.fparams[K.F_BEST] = 0.0

    def _state(self):
        return (self.X, self.parent, self.cost, self.child_head, self.sibling,
                self.cell_head, self.node_next, self.goal_nodes, self.near_buf, self.stack,
                self.origin, self.ncell, self.goal, self.meta, self.fparams, self.rm.code,
                *self._obs)

    def __len__(self) -> int:
        return int(self.meta[K.M_COUNT])

    @property
    def nodes(self) -> np.ndarray:
        return self.X[: len(self)]

    @property
    def best_cost(self) -> float:
        return float(self.fparams[K.F_BEST])

    def near_radius(self) -> float:
        n = len(self) + 1.0
        r = self.fparams[K.F_RADIUS_COEF] * (math.log(n) / n) ** (1.0 / self.rm.config_dim)
        return float(min(r, self.fparams[K.F_RADIUS_CAP]))

    def step(self, x_rand) -> int | None:
        x_rand = np.asarray(x_rand, dtype=np.float64)
        i = K.rrt_star_step(x_rand, *self._state())
        return None if i < 0 else int(i)

    def run(self, samples: np.ndarray, stop_cost: float, history: np.ndarray) -> int:
        samples = np.ascontiguousarray(samples, dtype=np.float64)
        return int(K.run_samples(samples, float(stop_cost), history, *self._state()))

    def nearest(self, q) -> int:
        q = np.asarray(q, dtype=np.float64)
        return int(K.grid_nearest(q, self.X, len(self), self.cell_head, self.node_next,
                                  self.origin, self.fparams[K.F_CELL], self.ncell))

    def near(self, q, r: float) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        m = K.grid_near(q, float(r), self.X, self.cell_head, self.node_next, self.origin,
                        self.fparams[K.F_CELL], self.ncell, self.near_buf)
        return np.sort(self.near_buf[:m])

    def best_goal_node(self) -> int | None:
        ng = int(self.meta[K.M_NGOAL])
        if ng == 0:
            return None
        g = self.goal_nodes[:ng]
        # cheapest, lowest index on ties
        return int(g[np.lexsort((g, self.cost[g]))[0]])

    def path_to(self, i: int) -> np.ndarray:
        chain = []
        while i >= 0:
            chain.append(i)
            i = int(self.parent[i])
        return self.X[chain[::-1]].copy()

    def best_path(self) -> np.ndarray | None:
        g = self.best_goal_node()
        return None if g is None else self.path_to(g)

    def check_invariants(self, tol: float = 1e-9) -> None:
        n = len(self)
        if self.parent[0] != -1 or self.cost[0] != 0.0:
            raise AssertionError("root must have no parent and zero cost")
        for i in range(1, n):
            p = self.parent[i]
            if not 0 <= p < n:
                raise AssertionError(f"node {i} has invalid parent {p}")
            expect = self.cost[p] + np.linalg.norm(self.X[i] - self.X[p])
            if abs(expect - self.cost[i]) > tol * max(1.0, expect):
                raise AssertionError(f"cost of node {i} inconsistent with parent")
        # acyclic: every node reaches the root within n hops
        depth = np.full(n, -1)
        depth[0] = 0
        for i in range(n):
            chain = []
            j = i
            while depth[j] < 0:
                chain.append(j)
                j = self.parent[j]
                if len(chain) > n:
                    raise AssertionError("parent links contain a cycle")
            for k, c in enumerate(reversed(chain)):
                depth[c] = depth[j] + k + 1


# ---------------------------------------------------------------------------
# sample sources
# ---------------------------------------------------------------------------


class SamplerSource(Protocol):
    kind: str
    trace: list

    def peek(self, k: int, tree: Tree) -> np.ndarray | None: ...

    def advance(self, m: int) -> None: ...

    def draw(self, tree: Tree) -> np.ndarray: ...


class UniformSampler:
    """Uniform samples over the configuration box with a small goal bias.

    Samples are drawn from ``rng`` in fixed-size blocks, so the stream is the
    same whether it is consumed one at a time or in batches.
    """

    kind = "uniform"
    _BLOCK = 1024

    def __init__(self, rm: RobotModel, goal, rng: np.random.Generator, goal_bias: float = 0.05,
                 record: bool = False):
        self.bounds = rm.config_bounds
        self.goal = np.asarray(goal, dtype=np.float64)
        self.rng = rng
        self.goal_bias = goal_bias
        self._buf = np.zeros((0, rm.config_dim))
        self._is_goal = np.zeros(0, dtype=bool)
        self._pos = 0
        self.trace = [] if record else None

    def _fill(self, k: int):
        while len(self._buf) - self._pos < k:
            pts = self.rng.uniform(-self.bounds, self.bounds, size=(self._BLOCK, len(self.bounds)))
            flag = self.rng.random(self._BLOCK) < self.goal_bias
            pts[flag] = self.goal
            self._buf = np.concatenate([self._buf[self._pos:], pts])
            self._is_goal = np.concatenate([self._is_goal[self._pos:], flag])
            self._pos = 0

    def peek(self, k: int, tree: Tree | None = None) -> np.ndarray:
        self._fill(k)
        return self._buf[self._pos: self._pos + k]

    def advance(self, m: int) -> None:
        if self.trace is not None:
            flags = self._is_goal[self._pos: self._pos + m]
            self.trace.extend(GOAL if f else UNIFORM for f in flags)
        self._pos += m

    def draw(self, tree: Tree | None = None) -> np.ndarray:
        x = self.peek(1)[0].copy()
        self.advance(1)
        return x


def informed_sample(best_cost: float, x_init, x_goal, rng: np.random.Generator,
                    bounds=None, max_tries: int = 100_000) -> np.ndarray:
    """Uniform sample from the prolate hyperspheroid with foci x_init, x_goal.

    With an infinite ``best_cost`` the sample is uniform over ``bounds``.
    Rejection keeps samples inside the bounds.
    """
    x_init = np.asarray(x_init, dtype=np.float64)
    x_goal = np.asarray(x_goal, dtype=np.float64)
    d = len(x_init)
    bounds = np.full(d, 20.0) if bounds is None else np.asarray(bounds, dtype=np.float64)
    if not np.isfinite(best_cost):
        return rng.uniform(-bounds, bounds)
    c_min = float(np.linalg.norm(x_goal - x_init))
    if best_cost < c_min - 1e-12:
        raise ContractError("best_cost cannot be shorter than the focal distance")
    center = 0.5 * (x_init + x_goal)
    C = _rotation_to_world(x_init, x_goal)
    r1 = best_cost / 2.0
    ri = math.sqrt(max(best_cost**2 - c_min**2, 0.0)) / 2.0
    radii = np.array([r1] + [ri] * (d - 1))
    for _ in range(max_tries):
        v = rng.standard_normal(d)
        v *= rng.random() ** (1.0 / d) / np.linalg.norm(v)
        x = C @ (radii * v) + center
        if np.all(np.abs(x) <= bounds):
            return x
    # ellipse almost entirely outside the box: fall back to the focal midpoint
    return np.clip(center, -bounds, bounds)


def _rotation_to_world(x_init, x_goal) -> np.ndarray:
    d = len(x_init)
    a1 = x_goal - x_init
    n = np.linalg.norm(a1)
    if n == 0:
        return np.eye(d)
    M = np.outer(a1 / n, np.eye(d)[0])
    U, _, Vt = np.linalg.svd(M)
    diag = np.ones(d)
    diag[-1] = np.linalg.det(U) * np.linalg.det(Vt)
    return U @ np.diag(diag) @ Vt


class InformedSampler:
    """Uniform (goal-biased) until a solution exists, then informed samples."""

    kind = "informed"
    # uniform blocks must end at the first solution so the switch is immediate
    switches_on_solution = True

    def __init__(self, rm: RobotModel, x_init, x_goal, rng: np.random.Generator,
                 goal_bias: float = 0.05, record: bool = False):
        self.uniform = UniformSampler(rm, x_goal, rng, goal_bias)
        self.rng = rng
        self.x_init = np.asarray(x_init, dtype=np.float64)
        self.x_goal = np.asarray(x_goal, dtype=np.float64)
        self.bounds = rm.config_bounds
        self.trace = [] if record else None
        self.uniform.trace = self.trace

    def peek(self, k: int, tree: Tree) -> np.ndarray | None:
        if np.isfinite(tree.best_cost):
            return None
        return self.uniform.peek(k)

    def advance(self, m: int) -> None:
        self.uniform.advance(m)

    def draw(self, tree: Tree) -> np.ndarray:
        if not np.isfinite(tree.best_cost):
            return self.uniform.draw()
        if self.trace is not None:
            self.trace.append(INFORMED)
        # the goal ball lets solutions end up to goal_radius short of x_goal
        c = max(tree.best_cost + tree.params.goal_radius,
                float(np.linalg.norm(self.x_goal - self.x_init)))
        return informed_sample(c, self.x_init, self.x_goal, self.rng, self.bounds)


def make_sampler(kind: str, problem: Problem, rng: np.random.Generator,
                 params: PlannerParams, record: bool = False):
    if kind in ("rrtstar", "uniform"):
        return UniformSampler(problem.rm, problem.x_goal, rng, params.goal_bias, record)
    if kind == "informed":
        return InformedSampler(problem.rm, problem.x_init, problem.x_goal, rng,
                               params.goal_bias, record)
    raise ContractError(f"unknown sampler kind {kind!r}")


def sampler_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(uniform stream, neural stream) derived from one seed.

    Every planner takes its uniform samples from the first stream, so runs
    that differ only in their neural phase stay paired.
    """
    a, b = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------


@dataclass
class PlanResult:
    found: bool
    cost: float
    path: np.ndarray | None
    iterations: int
    nodes: int
    wall_ms: float
    sampler_kind: str
    seed: int
    history: np.ndarray = field(default=None, repr=False)
    first_solution: int | None = None
    trace: list | None = field(default=None, repr=False)
    error: str | None = None

    def to_json(self) -> dict:
        out = {
            "found": bool(self.found),
            "cost": float(self.cost) if self.found else None,
            "path": None if self.path is None else np.asarray(self.path).tolist(),
            "iterations": int(self.iterations),
            "nodes": int(self.nodes),
            "wall_ms": float(self.wall_ms),
            "sampler_kind": self.sampler_kind,
            "seed": int(self.seed),
        }
        if self.error:
            out["error"] = self.error
        return out

    def iterations_to(self, threshold: float) -> int | None:
        """First iteration count (1-based) whose best cost is <= threshold."""
        if self.history is None:
            return None
        hit = np.flatnonzero(self.history <= threshold)
        return int(hit[0]) + 1 if len(hit) else None


def _error_result(kind, seed, msg) -> PlanResult:
    return PlanResult(False, math.inf, None, 0, 0, 0.0, kind, seed,
                      history=np.zeros(0), error=msg)


def plan(problem: Problem, sampler, params: PlannerParams, stop_cost: float | None = None,
         chunk: int = 512) -> PlanResult:
    """Run RRT* for up to ``params.max_iterations`` samples from ``sampler``.

    ``stop_cost`` ends the run as soon as the best goal cost drops to it
    (``FIRST_SOLUTION`` stops at the first solution).
    """
    t0 = time.perf_counter()
    ws, rm = problem.ws, problem.rm
    x_init = as_config(problem.x_init, rm)
    x_goal = as_config(problem.x_goal, rm)
    kind = getattr(sampler, "kind", "custom")
    if not is_config_free(ws, rm, x_init):
        return _error_result(kind, params.seed, "start configuration is in collision")
    if not is_config_free(ws, rm, x_goal):
        return _error_result(kind, params.seed, "goal configuration is in collision")

    n = params.max_iterations
    tree = Tree(ws, rm, x_init, x_goal, params, capacity=n + 1)
    history = np.full(n, np.inf)
    stop = -np.inf if stop_cost is None else float(stop_cost)
    switch = getattr(sampler, "switches_on_solution", False)
    i = 0
    if tree.best_cost <= stop or tree.best_cost == 0.0:
        n = 0
    while i < n:
        block = sampler.peek(min(chunk, n - i), tree)
        if block is not None:
            block_stop = max(stop, FIRST_SOLUTION) if switch else stop
            used = tree.run(block, block_stop, history[i: i + len(block)])
            sampler.advance(used)
            i += used
            if tree.best_cost <= stop:
                break
        else:
            tree.step(sampler.draw(tree))
            history[i] = tree.best_cost
            i += 1
            if tree.best_cost <= stop:
                break
    history = history[:i]
    path = tree.best_path()
    found = path is not None
    first = None
    if found and len(history):
        hit = np.flatnonzero(np.isfinite(history))
        first = int(hit[0]) + 1 if len(hit) else 0
    elif found:
        first = 0
    return PlanResult(
        found=found,
        cost=path_cost(path) if found else math.inf,
        path=path,
        iterations=i,
        nodes=len(tree),
        wall_ms=(time.perf_counter() - t0) * 1e3,
        sampler_kind=kind,
        seed=params.seed,
        history=history,
        first_solution=first,
        trace=getattr(sampler, "trace", None),
    )


def plan_rrt_star(problem: Problem, params: PlannerParams, kind: str = "rrtstar",
                  stop_cost: float | None = None, record: bool = False) -> PlanResult:
    rng, _ = sampler_streams(params.seed)
    sampler = make_sampler(kind, problem, rng, params, record)
    res = plan(problem, sampler, params, stop_cost)
    res.sampler_kind = kind
    return res


def rrt_star_step(tree: Tree, x_rand) -> int | None:
    """One RRT* extend/rewire iteration on ``tree``; None when rejected."""
    return tree.step(x_rand)
