"""Paired planner trials, per-cell timing statistics, CSV/markdown reports and SVG renders."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from neuroplan.cae import load_cae
from neuroplan.datagen import (
    Dataset, generate_workspace, load_dataset, sample_start_goal, scenario_robot, worker_count,
)
from neuroplan.deepsmp import (
    DeepSmpConfig, deepsmp_plan, deepsmp_plan_bidirectional, default_n_limit,
)
from neuroplan.errors import ConfigurationError, ContractError
from neuroplan.geometry import RobotModel, Workspace, is_motion_free
from neuroplan.sampler import load_sampler
from neuroplan.smp import PlannerParams, PlanResult, Problem, plan_rrt_star

log = logging.getLogger(__name__)

ALGOS = ("rrtstar", "informed", "deepsmp", "deepsmp-bi")
NEURAL_ALGOS = ("deepsmp", "deepsmp-bi")
CSV_COLUMNS = ("scenario", "test_case", "algo", "t_mean", "t_max", "t_min", "success",
               "mean_cost", "mean_iters")

# Published mean/max/min seconds, cited for comparison only (different hardware and scale).
REFERENCE_ROWS = [
    ("s2D", "seen", 0.90, 1.09, 0.78, 9.61, 11.90, 3.21, 4.62, 10.68, 1.79),
    ("s2D", "unseen", 0.92, 1.00, 0.87, 9.89, 9.24, 6.19, 5.05, 3.68, 1.45),
    ("c2D", "seen", 1.62, 2.19, 1.09, 10.81, 14.30, 7.11, 6.56, 12.02, 3.22),
    ("c2D", "unseen", 1.46, 2.11, 1.00, 11.21, 12.51, 4.36, 5.72, 9.89, 2.92),
    ("c3D", "seen", 1.16, 1.72, 0.72, 18.15, 74.50, 16.69, 16.92, 49.03, 6.19),
    ("c3D", "unseen", 1.36, 1.96, 0.94, 18.43, 49.37, 12.17, 15.96, 26.16, 12.53),
    ("rigid", "seen", 1.61, 2.65, 0.71, 42.78, 209.12, 38.34, 16.01, 34.64, 7.81),
    ("rigid", "unseen", 1.72, 2.81, 1.01, 43.74, 188.63, 27.45, 16.61, 34.65, 7.85),
]


@dataclass
class TrialSpec:
    dataset: str
    algos: list = field(default_factory=lambda: ["rrtstar", "informed", "deepsmp"])
    trials: int = 20
    splits: list = field(default_factory=lambda: ["seen", "unseen"])
    max_problems: int | None = None  # per split
    max_iterations: int = 10_000
    delta: float = 0.05
    reference_factor: int = 10
    seed: int = 0
    cae: str | None = None
    sampler: str | None = None
    n_limit: int | None = None  # None: longest training path, capped at n/2

    def __post_init__(self):
        if self.trials < 1:
            raise ContractError("need at least one trial per problem")
        if not self.algos:
            raise ContractError("need at least one algorithm")
        unknown = [a for a in self.algos if a not in ALGOS]
        if unknown:
            raise ContractError(f"unknown algorithms {unknown}; choose from {ALGOS}")
        if self.delta < 0 or self.reference_factor < 1:
            raise ContractError("delta must be >= 0 and reference_factor >= 1")

    @classmethod
    def load(cls, path) -> TrialSpec:
        data = json.loads(Path(path).read_text())
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"{path}: unknown trial spec keys {sorted(unknown)}")
        spec = cls(**data)
        base = Path(path).parent
        for name in ("dataset", "cae", "sampler"):
            value = getattr(spec, name)
            if value is not None and not Path(value).is_absolute():
                setattr(spec, name, str(base / value))
        return spec

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"


@dataclass
class TrialRecord:
    scenario: str
    test_case: str
    problem: int
    algo: str
    trial: int
    seed: int
    reference: float
    success: bool  # reached (1 + delta) * reference
    found: bool
    cost: float
    iterations: int
    wall_s: float


@dataclass
class BenchRow:
    scenario: str
    test_case: str
    algo: str
    t_mean: float
    t_max: float
    t_min: float
    success: float
    mean_cost: float
    mean_iters: float
    trials: int


@dataclass
class BenchTable:
    rows: list
    ratios: dict  # (scenario, test_case, algo_a, algo_b) -> t_mean(a) / t_mean(b)
    records: list

    def row(self, scenario: str, test_case: str, algo: str) -> BenchRow:
        for r in self.rows:
            if (r.scenario, r.test_case, r.algo) == (scenario, test_case, algo):
                return r
        raise KeyError((scenario, test_case, algo))

    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            times = [f"{r.t_mean:.6f}", f"{r.t_max:.6f}", f"{r.t_min:.6f}"] if timing else ["", "", ""]
            w.writerow([r.scenario, r.test_case, r.algo, *times, f"{r.success:.6f}",
                        _fmt(r.mean_cost), f"{r.mean_iters:.3f}"])
        return buf.getvalue()


def _fmt(x: float) -> str:
    return "nan" if not math.isfinite(x) else f"{x:.6f}"


def aggregate(records: list[TrialRecord]) -> BenchTable:
    """Group trial records by (scenario, test_case, algo); rows keep first-seen order."""
    groups: dict = {}
    for rec in records:
        groups.setdefault((rec.scenario, rec.test_case, rec.algo), []).append(rec)
    rows = []
    for (scen, case, algo), recs in groups.items():
        t = np.array([r.wall_s for r in recs])
        found = [r.cost for r in recs if r.found]
        rows.append(BenchRow(
            scen, case, algo, float(t.mean()), float(t.max()), float(t.min()),
            float(np.mean([r.success for r in recs])),
            float(np.mean(found)) if found else math.nan,
            float(np.mean([r.iterations for r in recs])), len(recs),
        ))
    ratios = {}
    for a in rows:
        for b in rows:
            if (a.scenario, a.test_case) == (b.scenario, b.test_case) and a.algo != b.algo:
                ratios[(a.scenario, a.test_case, a.algo, b.algo)] = (
                    a.t_mean / b.t_mean if b.t_mean > 0 else math.inf)
    return BenchTable(rows, ratios, list(records))


def trial_seed(master: int, split: int, problem: int, trial: int) -> int:
    """Per-trial seed shared by every algorithm, so comparisons are paired."""
    ss = np.random.SeedSequence(master, spawn_key=(split, problem, trial))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def reference_cost(problem: Problem, params: PlannerParams, factor: int, seed: int) -> float:
    """Best cost of a uniform RRT* run with ``factor`` times the iteration budget."""
    res = plan_rrt_star(problem, params.with_(max_iterations=params.max_iterations * factor,
                                              seed=seed))
    return res.cost


@dataclass
class Planners:
    """Models and parameters shared read-only by all trials."""

    params: PlannerParams
    encoder: object = None
    sampler: object = None
    n_limit: int = 0

    def run(self, algo: str, problem: Problem, cloud, seed: int,
            stop_cost: float | None) -> PlanResult:
        if algo in ("rrtstar", "informed"):
            return plan_rrt_star(problem, self.params.with_(seed=seed), algo, stop_cost)
        cfg = DeepSmpConfig(self.encoder, self.sampler, self.params, self.n_limit)
        fn = deepsmp_plan_bidirectional if algo == "deepsmp-bi" else deepsmp_plan
        return fn(problem, cfg, cloud, seed=seed, stop_cost=stop_cost)


def load_planners(spec: TrialSpec, ds: Dataset) -> Planners:
    man = ds.manifest
    params = PlannerParams(step_size=man.step_size, goal_radius=man.goal_radius,
                           max_iterations=spec.max_iterations)
    planners = Planners(params)
    if any(a in NEURAL_ALGOS for a in spec.algos):
        missing = [n for n in ("cae", "sampler") if getattr(spec, n) is None
                   or not Path(getattr(spec, n)).exists()]
        if missing:
            raise ConfigurationError(f"neural algorithms need model files: missing {missing}")
        planners.encoder, _ = load_cae(spec.cae)
        planners.sampler = load_sampler(spec.sampler)
        if spec.n_limit is None:
            paths = [p for _, p in ds.training_paths()]
            planners.n_limit = default_n_limit(paths, spec.max_iterations)
        else:
            planners.n_limit = spec.n_limit
    return planners


def run_benchmark(spec: TrialSpec, workers: int | None = None) -> BenchTable:
    """Run every problem x algorithm x trial; stop each run at (1 + delta) x reference."""
    if not Path(spec.dataset).exists():
        raise ConfigurationError(f"dataset {spec.dataset} not found")
    ds = load_dataset(spec.dataset)
    planners = load_planners(spec, ds)
    rm = ds.robot
    jobs = []
    for si, split in enumerate(spec.splits):
        probs = list(ds.problems(split))[: spec.max_problems]
        if not probs:
            log.warning("no %s problems in %s", split, spec.dataset)
        for pi, (ws_seed, start, goal) in enumerate(probs):
            jobs.append((si, split, pi, ws_seed, Problem(start, goal, ds.workspaces[ws_seed], rm)))
    log.info("bench: %d problems, algos=%s, trials=%d, delta=%g, n=%d, n_limit=%d",
             len(jobs), spec.algos, spec.trials, spec.delta, spec.max_iterations,
             planners.n_limit)

    def reference(job):
        si, _, pi, _, problem = job
        return reference_cost(problem, planners.params, spec.reference_factor,
                              trial_seed(spec.seed, 100 + si, pi, 0))

    nw = workers or worker_count()
    with ThreadPoolExecutor(max_workers=nw) as pool:
        refs = list(pool.map(reference, jobs))

    trials = []
    for job, ref in zip(jobs, refs):
        for algo in spec.algos:
            for t in range(spec.trials):
                trials.append((job, ref, algo, t))

    def one(item) -> TrialRecord:
        (si, split, pi, ws_seed, problem), ref, algo, t = item
        seed = trial_seed(spec.seed, si, pi, t)
        threshold = (1.0 + spec.delta) * ref if math.isfinite(ref) else None
        res = planners.run(algo, problem, ds.clouds[ws_seed], seed, threshold)
        ok = res.found and threshold is not None and res.cost <= threshold
        return TrialRecord(ds.manifest.scenario, split, pi, algo, t, seed, ref, bool(ok),
                           res.found, res.cost, res.iterations, res.wall_ms / 1e3)

    with ThreadPoolExecutor(max_workers=nw) as pool:
        records = list(pool.map(one, trials))
    return aggregate(records)


def render_report(table: BenchTable, spec: TrialSpec | None = None, timing: bool = True) -> str:
    lines = ["# Benchmark report", ""]
    if spec is not None:
        lines += [f"Stopping rule: cost <= (1 + {spec.delta:g}) x reference, reference from "
                  f"uniform RRT* with {spec.reference_factor}x the {spec.max_iterations} "
                  f"iteration budget; {spec.trials} trials per problem.", ""]
    lines += ["| scenario | test case | algo | t_mean (s) | t_max (s) | t_min (s) | success "
              "| mean cost | mean iters |",
              "|---|---|---|---|---|---|---|---|---|"]
    for r in table.rows:
        t = (f"{r.t_mean:.4f} | {r.t_max:.4f} | {r.t_min:.4f}" if timing else "- | - | -")
        lines.append(f"| {r.scenario} | {r.test_case} | {r.algo} | {t} | {r.success:.3f} "
                     f"| {_fmt(r.mean_cost)} | {r.mean_iters:.1f} |")
    if table.ratios and timing:
        lines += ["", "Mean-time ratios (row / column):", ""]
        for (scen, case, a, b), v in sorted(table.ratios.items()):
            lines.append(f"- {scen} {case}: {a} / {b} = {v:.4f}")
    lines += ["", "## Published reference (cited, not reproduced)", "",
              "Seconds on the original hardware and dataset scale; absolute values and "
              "ratios are not expected to match this machine.", "",
              "| scenario | test case | DeepSMP t_mean | t_max | t_min | Informed-RRT* t_mean "
              "| t_max | t_min | BIT* t_mean | t_max | t_min |",
              "|---|---|---|---|---|---|---|---|---|---|---|"]
    for row in REFERENCE_ROWS:
        lines.append("| " + " | ".join(f"{v:.2f}" if isinstance(v, float) else v
                                       for v in row) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# solvable problem suites
# ---------------------------------------------------------------------------


def grid_certificate(ws: Workspace, rm: RobotModel, start, goal, cell: float = 0.5):
    """A collision-free path start -> goal through a lattice, or None.

    Each edge is checked with is_motion_free, so a returned path is a
    constructive proof that the problem is solvable. Point robots only.
    """
    if rm.kind == "rigid2":
        raise ContractError("grid certification is implemented for point robots")
    lo = -ws.side / 2 + cell / 2
    n = int(round(ws.side / cell))
    d = ws.dim

    def center(idx):
        return lo + cell * np.asarray(idx, dtype=np.float64)

    def snap(q):
        return tuple(int(v) for v in np.clip(np.floor((np.asarray(q) - lo + cell / 2) / cell),
                                                 0, n - 1))

    s_idx, g_idx = snap(start), snap(goal)
    if not (is_motion_free(ws, rm, start, center(s_idx))
            and is_motion_free(ws, rm, center(g_idx), goal)):
        return None
    steps = [tuple(int(k == j) * sgn for k in range(d)) for j in range(d) for sgn in (1, -1)]
    prev = {s_idx: None}
    queue = deque([s_idx])
    while queue:
        cur = queue.popleft()
        if cur == g_idx:
            break
        for st in steps:
            nxt = tuple(c + o for c, o in zip(cur, st))
            if nxt in prev or min(nxt) < 0 or max(nxt) >= n:
                continue
            if is_motion_free(ws, rm, center(cur), center(nxt)):
                prev[nxt] = cur
                queue.append(nxt)
    if g_idx not in prev:
        return None
    chain = []
    cur = g_idx
    while cur is not None:
        chain.append(center(cur))
        cur = prev[cur]
    return np.vstack([np.asarray(start, float), *chain[::-1], np.asarray(goal, float)])


def solvable_suite(scenario: str, count: int, seed: int = 0, cell: float = 0.5):
    """``count`` (workspace, start, goal) problems, each certified solvable on a lattice."""
    rm = scenario_robot(scenario)
    out = []
    k = 0
    while len(out) < count:
        if k > 20 * count + 20:
            raise ConfigurationError("could not certify enough solvable problems")
        ss = np.random.SeedSequence(seed, spawn_key=(k,))
        ws_seed, pair_seed = (int(v) for v in ss.generate_state(2, dtype=np.uint32))
        k += 1
        ws = generate_workspace(scenario, ws_seed)
        s, g = sample_start_goal(ws, rm, pair_seed)
        if grid_certificate(ws, rm, s, g, cell) is not None:
            out.append(Problem(s, g, ws, rm))
    return out


# ---------------------------------------------------------------------------
# SVG rendering
# ---------------------------------------------------------------------------

_PX = 10.0  # pixels per world unit
_PAD = 10.0


def _panel(ws: Workspace, path, start, goal, axes, x0: float) -> list[str]:
    lo, hi = -ws.bounds[axes[0]], ws.bounds[axes[0]]
    lo2, hi2 = -ws.bounds[axes[1]], ws.bounds[axes[1]]
    w, h = (hi - lo) * _PX, (hi2 - lo2) * _PX

    def px(q):
        return x0 + (q[axes[0]] - lo) * _PX, _PAD + (hi2 - q[axes[1]]) * _PX

    out = [f'<rect class="frame" x="{x0:.2f}" y="{_PAD:.2f}" width="{w:.2f}" height="{h:.2f}" '
           'fill="white" stroke="black"/>']
    for ob in ws.obstacles:
        a, b = ob.lo, ob.hi
        x, y = px([a[i] if i == axes[0] else b[i] for i in range(ws.dim)])
        out.append(f'<rect class="obstacle" x="{x:.2f}" y="{y:.2f}" '
                   f'width="{(b[axes[0]] - a[axes[0]]) * _PX:.2f}" '
                   f'height="{(b[axes[1]] - a[axes[1]]) * _PX:.2f}" fill="#666666" '
                   'fill-opacity="0.6"/>')
    if path is not None and len(path) > 0:
        pts = " ".join("{:.2f},{:.2f}".format(*px(q)) for q in path)
        out.append(f'<polyline class="path" points="{pts}" fill="none" stroke="#d62728" '
                   'stroke-width="2"/>')
    for cls, q, color in (("start", start, "#2ca02c"), ("goal", goal, "#1f77b4")):
        if q is not None:
            x, y = px(q)
            out.append(f'<circle class="{cls}" cx="{x:.2f}" cy="{y:.2f}" r="5" fill="{color}"/>')
    return out


def render_path_svg(ws: Workspace, path, out=None, start=None, goal=None) -> str:
    """SVG of the workspace and path; 3D worlds get xy, xz and yz projections side by side.

    Returns the document text and also writes it to ``out`` when given.
    """
    path = None if path is None or len(path) == 0 else np.asarray(path, dtype=np.float64)
    if path is not None:
        start = path[0] if start is None else start
        goal = path[-1] if goal is None else goal
    if path is not None and path.shape[1] > ws.dim:
        path = path[:, : ws.dim]  # rigid bodies: draw the reference point
    start = None if start is None else np.asarray(start, dtype=np.float64)[: ws.dim]
    goal = None if goal is None else np.asarray(goal, dtype=np.float64)[: ws.dim]
    views = [(0, 1)] if ws.dim == 2 else [(0, 1), (0, 2), (1, 2)]
    panel_w = 2 * ws.bounds[0] * _PX
    body = []
    for k, axes in enumerate(views):
        body += _panel(ws, path, start, goal, axes, _PAD + k * (panel_w + _PAD))
    width = _PAD + len(views) * (panel_w + _PAD)
    height = 2 * _PAD + 2 * max(ws.bounds) * _PX
    doc = "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.2f} {height:.2f}">',
        *body, "</svg>", ""])
    if out is not None:
        Path(out).write_text(doc)
    return doc
