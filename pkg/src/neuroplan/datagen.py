"""Random workspaces, start/goal sampling, RRT* expert paths and dataset I/O."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from neuroplan.errors import ConfigurationError, ContractError, FormatError, GenerationError
from neuroplan.geometry import (
    REGION_HALF, AabbObstacle, RobotModel, Workspace, interpolate, is_config_free,
    is_motion_free, load_cloud, path_cost, path_is_feasible, sample_point_cloud, save_cloud,
)
from neuroplan.smp import PlannerParams, Problem, plan_rrt_star

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 10_000

# block layouts per scenario: (dim, robot, block count, min side, max side)
SCENARIOS = {
    "s2D": (2, "point2", 7, 5.0, 5.0),
    "c2D": (2, "point2", 10, 5.0, 5.0),
    "c3D": (3, "point3", 10, 5.0, 10.0),
    "rigid": (2, "rigid2", 7, 5.0, 5.0),
}


def scenario_robot(scenario: str) -> RobotModel:
    return RobotModel(SCENARIOS[_check_scenario(scenario)][1])


def _check_scenario(scenario: str) -> str:
    if scenario not in SCENARIOS:
        raise ContractError(f"unknown scenario {scenario!r}; choose from {sorted(SCENARIOS)}")
    return scenario


def generate_workspace(scenario: str, seed: int, n_blocks: int | None = None) -> Workspace:
    """Place non-overlapping axis-aligned blocks in the 40-wide region.

    Obstacles are stored sorted by center so that workspaces present their
    blocks in a consistent order.
    """
    dim, _, count, smin, smax = SCENARIOS[_check_scenario(scenario)]
    count = count if n_blocks is None else n_blocks
    rng = np.random.default_rng(seed)
    placed: list[AabbObstacle] = []
    attempts = 0
    while len(placed) < count:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise GenerationError(f"could not place {count} blocks for seed {seed}")
        half = rng.uniform(smin, smax) / 2.0 if smax > smin else smin / 2.0
        center = rng.uniform(-REGION_HALF + half, REGION_HALF - half, size=dim)
        ob = AabbObstacle(tuple(float(c) for c in center), (float(half),) * dim)
        if any(ob.overlaps(o) for o in placed):
            continue
        placed.append(ob)
    placed.sort(key=lambda o: o.center)
    return Workspace(dim, tuple(placed), seed=int(seed))


def sample_start_goal(ws: Workspace, rm: RobotModel, seed, min_separation: float | None = None):
    """Two free configurations whose positions are at least a quarter of the region apart."""
    rng = np.random.default_rng(seed)
    if min_separation is None:
        min_separation = 0.25 * ws.side
    b = rm.config_bounds
    for _ in range(MAX_ATTEMPTS):
        s = rng.uniform(-b, b)
        g = rng.uniform(-b, b)
        if np.linalg.norm((g - s)[: ws.dim]) < min_separation:
            continue
        if is_config_free(ws, rm, s) and is_config_free(ws, rm, g):
            return s, g
    raise GenerationError("no free start/goal pair found")


def shortcut(ws: Workspace, rm: RobotModel, path: np.ndarray, resolution=None) -> np.ndarray:
    """Greedy pruning: from each kept waypoint jump to the farthest visible one."""
    path = np.asarray(path)
    out = [path[0]]
    i = 0
    while i < len(path) - 1:
        j = len(path) - 1
        while j > i + 1 and not is_motion_free(ws, rm, path[i], path[j], resolution):
            j -= 1
        out.append(path[j])
        i = j
    return np.array(out)


def generate_expert_path(ws: Workspace, rm: RobotModel, start, goal, budget: int = 30_000,
                         params: PlannerParams | None = None, seed: int = 0, prune: bool = True,
                         spacing: float | None = None) -> np.ndarray | None:
    """Near-optimal path from a long uniform RRT* run, or None if unsolved.

    The exact goal is appended when reachable from the last tree node;
    ``prune`` removes redundant waypoints and ``spacing`` then resamples the
    polyline evenly (both keep the path collision free).
    """
    params = (params or PlannerParams()).with_(max_iterations=budget, seed=seed)
    res = plan_rrt_star(Problem(np.asarray(start, float), np.asarray(goal, float), ws, rm), params)
    if not res.found:
        log.info("expert planner failed within %d iterations", budget)
        return None
    path = res.path
    goal = np.asarray(goal, dtype=np.float64)
    if not np.array_equal(path[-1], goal) and is_motion_free(ws, rm, path[-1], goal,
                                                             params.resolution):
        path = np.vstack([path, goal])
    if prune:
        path = shortcut(ws, rm, path, params.resolution)
    if spacing:
        path = interpolate(path, spacing)
    return path


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    scenario: str = "s2D"
    train_workspaces: int = 10
    paths_per_workspace: int = 200
    seen_test_pairs: int = 5
    unseen_workspaces: int = 2
    unseen_pairs: int = 100
    master_seed: int = 0
    expert_budget: int = 30_000
    step_size: float = 0.5
    goal_radius: float = 1.0
    prune: bool = True
    waypoint_spacing: float | None = 0.5
    n_blocks: int | None = None
    cloud_size: int = 1400
    cae_clouds: int = 0  # extra workspaces whose clouds only feed CAE training
    train_seeds: list = field(default_factory=list)
    unseen_seeds: list = field(default_factory=list)

    def __post_init__(self):
        _check_scenario(self.scenario)
        for name in ("train_workspaces", "paths_per_workspace", "unseen_workspaces",
                     "unseen_pairs", "expert_budget"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.seen_test_pairs < 0 or self.cae_clouds < 0:
            raise ContractError("seen_test_pairs and cae_clouds must be non-negative")
        if not self.train_seeds:
            self.train_seeds = _derive_seeds(self.master_seed, 0, self.train_workspaces)
        if not self.unseen_seeds:
            self.unseen_seeds = _derive_seeds(self.master_seed, 1, self.unseen_workspaces)
        check_split(self.train_seeds, self.unseen_seeds)

    @classmethod
    def full_scale(cls, scenario: str = "s2D", **kw) -> DatasetManifest:
        return cls(scenario=scenario, train_workspaces=100, paths_per_workspace=4000,
                   seen_test_pairs=200, unseen_workspaces=10, unseen_pairs=2000, **kw)

    def planner_params(self) -> PlannerParams:
        return PlannerParams(step_size=self.step_size, goal_radius=self.goal_radius)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> DatasetManifest:
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _derive_seeds(master: int, split: int, count: int) -> list[int]:
    out = []
    for i in range(count):
        ss = np.random.SeedSequence(master, spawn_key=(split, i))
        out.append(int(ss.generate_state(1, dtype=np.uint32)[0]))
    return out


def check_split(train_seeds, unseen_seeds) -> None:
    if len(set(train_seeds)) != len(train_seeds) or len(set(unseen_seeds)) != len(unseen_seeds):
        raise ConfigurationError("duplicate workspace seeds within a split")
    shared = set(train_seeds) & set(unseen_seeds)
    if shared:
        raise ConfigurationError(f"unseen workspaces overlap the training split: {sorted(shared)}")


def _unit_seed(master: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master, spawn_key=tuple(key))


def _workspace_paths(man: DatasetManifest, ws: Workspace, index: int):
    rm = scenario_robot(man.scenario)
    params = man.planner_params()
    paths = []
    attempt = 0
    while len(paths) < man.paths_per_workspace:
        if attempt >= 3 * man.paths_per_workspace + 10:
            raise GenerationError(f"workspace {ws.seed}: too many unsolved expert problems")
        ss = _unit_seed(man.master_seed, 2, index, attempt)
        pair_seed, plan_seed = (int(s) for s in ss.generate_state(2, dtype=np.uint32))
        attempt += 1
        s, g = sample_start_goal(ws, rm, pair_seed)
        path = generate_expert_path(ws, rm, s, g, man.expert_budget, params, plan_seed,
                                    man.prune, man.waypoint_spacing)
        if path is not None:
            paths.append(path)
    return paths


def _test_pairs(man: DatasetManifest, ws: Workspace, split: int, index: int, count: int):
    rm = scenario_robot(man.scenario)
    out = []
    for k in range(count):
        ss = _unit_seed(man.master_seed, 3 + split, index, k)
        s, g = sample_start_goal(ws, rm, int(ss.generate_state(1, dtype=np.uint32)[0]))
        out.append({"start": s.tolist(), "goal": g.tolist()})
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True) + "\n")


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("NEUROPLAN_THREADS", "1")))
    except ValueError:
        return 1


def build_dataset(man: DatasetManifest, out_dir, workers: int | None = None) -> Path:
    """Generate every workspace, cloud, expert path and test pair under ``out_dir``."""
    out = Path(out_dir)
    for sub in ("workspaces", "clouds", "paths", "pairs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    check_split(man.train_seeds, man.unseen_seeds)

    def train_unit(index: int):
        seed = man.train_seeds[index]
        ws = generate_workspace(man.scenario, seed, man.n_blocks)
        paths = _workspace_paths(man, ws, index)
        seen = _test_pairs(man, ws, 0, index, man.seen_test_pairs)
        return ws, paths, seen

    with ThreadPoolExecutor(max_workers=workers or worker_count()) as pool:
        train = list(pool.map(train_unit, range(len(man.train_seeds))))

    for index, (ws, paths, seen) in enumerate(train):
        _write_workspace(out, ws, man)
        pdir = out / "paths" / f"ws_{ws.seed}"
        pdir.mkdir(exist_ok=True)
        for k, path in enumerate(paths):
            _write_json(pdir / f"path_{k}.json", {
                "workspace": ws.seed, "configs": path.tolist(), "cost": path_cost(path),
            })
        _write_json(out / "pairs" / f"ws_{ws.seed}.json", {"split": "seen", "pairs": seen})

    for index, seed in enumerate(man.unseen_seeds):
        ws = generate_workspace(man.scenario, seed, man.n_blocks)
        _write_workspace(out, ws, man)
        pairs = _test_pairs(man, ws, 1, index, man.unseen_pairs)
        _write_json(out / "pairs" / f"ws_{ws.seed}.json", {"split": "unseen", "pairs": pairs})

    if man.cae_clouds:
        cdir = out / "cae_clouds"
        cdir.mkdir(exist_ok=True)
        held = set(man.train_seeds) | set(man.unseen_seeds)
        for seed in _derive_seeds(man.master_seed, 5, man.cae_clouds):
            if seed in held:
                continue
            ws = generate_workspace(man.scenario, seed, man.n_blocks)
            save_cloud(cdir / f"cloud_{seed}.f32bin", sample_point_cloud(ws, man.cloud_size, seed))

    (out / "manifest.json").write_text(man.to_json())
    log.info("dataset written to %s", out)
    return out


def _write_workspace(out: Path, ws: Workspace, man: DatasetManifest) -> None:
    ws.save(out / "workspaces" / f"ws_{ws.seed}.json")
    cloud = sample_point_cloud(ws, man.cloud_size, seed=ws.seed)
    save_cloud(out / "clouds" / f"ws_{ws.seed}.f32bin", cloud)


@dataclass
class Dataset:
    root: Path
    manifest: DatasetManifest
    manifest_hash: str
    workspaces: dict
    clouds: dict
    paths: dict
    test_pairs: dict  # seed -> (split, [(start, goal), ...])

    @property
    def robot(self) -> RobotModel:
        return scenario_robot(self.manifest.scenario)

    def training_paths(self):
        for seed in self.manifest.train_seeds:
            for p in self.paths.get(seed, []):
                yield seed, p

    def problems(self, split: str):
        """(workspace seed, start, goal) for every test pair of a split."""
        seeds = self.manifest.train_seeds if split == "seen" else self.manifest.unseen_seeds
        for seed in seeds:
            for s, g in self.test_pairs.get(seed, ("", []))[1]:
                yield seed, s, g


def manifest_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_dataset(root, validate: bool = True) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise ConfigurationError(f"{mpath} not found")
    try:
        man = DatasetManifest.from_dict(json.loads(mpath.read_text()))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: {exc}") from exc
    check_split(man.train_seeds, man.unseen_seeds)
    rm = scenario_robot(man.scenario)
    workspaces, clouds, paths, pairs = {}, {}, {}, {}
    for seed in list(man.train_seeds) + list(man.unseen_seeds):
        wpath = root / "workspaces" / f"ws_{seed}.json"
        if not wpath.exists():
            raise ConfigurationError(f"missing workspace file {wpath}")
        workspaces[seed] = Workspace.load(wpath)
        clouds[seed] = load_cloud(root / "clouds" / f"ws_{seed}.f32bin")
        ppath = root / "pairs" / f"ws_{seed}.json"
        if ppath.exists():
            data = json.loads(ppath.read_text())
            pairs[seed] = (data["split"], [(np.array(p["start"]), np.array(p["goal"]))
                                           for p in data["pairs"]])
    for seed in man.train_seeds:
        pdir = root / "paths" / f"ws_{seed}"
        files = sorted(pdir.glob("path_*.json"), key=lambda p: int(p.stem.split("_")[1]))
        paths[seed] = [np.array(json.loads(f.read_text())["configs"]) for f in files]
        if validate:
            for f, p in zip(files, paths[seed]):
                if not path_is_feasible(workspaces[seed], rm, p):
                    raise FormatError(f"{f}: stored path is not collision free")
    return Dataset(root, man, manifest_hash(mpath), workspaces, clouds, paths, pairs)
