import json
import shutil
from itertools import combinations

import numpy as np
import pytest

from neuroplan.datagen import (
    DatasetManifest, build_dataset, generate_expert_path, generate_workspace, load_dataset,
    manifest_hash, sample_start_goal, scenario_robot,
)
from neuroplan.deepsmp import compute_n_limit
from neuroplan.errors import ConfigurationError, ContractError, FormatError
from neuroplan.geometry import AabbObstacle, Workspace, is_config_free, is_motion_free, path_cost
from neuroplan.smp import PlannerParams, Problem, plan_rrt_star

SMALL = dict(train_workspaces=2, paths_per_workspace=3, seen_test_pairs=2, unseen_workspaces=1,
             unseen_pairs=2, expert_budget=1500, cae_clouds=3)


def files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.parametrize("scenario", ["s2D", "c2D", "c3D", "rigid"])
def test_workspace_generation(scenario):
    a = generate_workspace(scenario, 7)
    assert a == generate_workspace(scenario, 7)
    assert a != generate_workspace(scenario, 8)
    assert a.side == 40
    expect = {"s2D": 7, "c2D": 10, "c3D": 10, "rigid": 7}[scenario]
    assert len(a.obstacles) == expect
    for o in a.obstacles:
        lo, hi = np.subtract(o.center, o.half_extents), np.add(o.center, o.half_extents)
        assert np.all(lo >= -20) and np.all(hi <= 20)
        side = 2 * np.asarray(o.half_extents)
        assert np.all((side >= 5 - 1e-12) & (side <= (10 if scenario == "c3D" else 5) + 1e-12))
    # interval oracle: boxes overlap iff every axis interval overlaps
    for p, q in combinations(a.obstacles, 2):
        gap = np.abs(np.subtract(p.center, q.center)) - np.add(p.half_extents, q.half_extents)
        assert np.any(gap > 0)
    with pytest.raises(ContractError):
        generate_workspace("maze", 1)


@pytest.mark.parametrize("scenario", ["s2D", "c3D", "rigid"])
def test_start_goal_sampling(scenario):
    rm = scenario_robot(scenario)
    ws = generate_workspace(scenario, 3)
    for seed in range(20):
        s, g = sample_start_goal(ws, rm, seed)
        assert is_config_free(ws, rm, s) and is_config_free(ws, rm, g)
        assert np.linalg.norm((g - s)[: ws.dim]) >= 10.0
        s2, g2 = sample_start_goal(ws, rm, seed)
        assert np.array_equal(s, s2) and np.array_equal(g, g2)
    s, g = sample_start_goal(Workspace(2, []), scenario_robot("s2D"), 0)
    assert np.linalg.norm(g - s) >= 10.0


def test_expert_path_empty_world_prunes_to_two_nodes():
    rm = scenario_robot("s2D")
    s, g = np.array([-12.0, -3.0]), np.array([11.0, 9.0])
    path = generate_expert_path(Workspace(2, []), rm, s, g, budget=2000, spacing=None)
    assert len(path) == 2
    assert np.array_equal(path[0], s) and np.array_equal(path[-1], g)
    even = generate_expert_path(Workspace(2, []), rm, s, g, budget=2000, spacing=0.5)
    steps = np.linalg.norm(np.diff(even, axis=0), axis=1)
    assert np.all(steps <= 0.5 + 1e-12) and np.ptp(steps) < 1e-9


def test_expert_paths_feasible_and_near_reference_cost():
    rm = scenario_robot("s2D")
    ratios = []
    for k in range(10):
        ws = generate_workspace("s2D", 100 + k)
        s, g = sample_start_goal(ws, rm, k)
        path = generate_expert_path(ws, rm, s, g, budget=2000, seed=k)
        assert path is not None
        for a, b in zip(path[:-1], path[1:]):
            assert is_motion_free(ws, rm, a, b, resolution=0.05)
        ref = plan_rrt_star(Problem(s, g, ws, rm), PlannerParams(max_iterations=20000, seed=50 + k))
        ratios.append(path_cost(path) / ref.cost)
    assert max(ratios) <= 1.2


def test_unsolvable_expert_problem_returns_none():
    ring = [AabbObstacle((0.0, 4.0), (5.0, 1.0)), AabbObstacle((0.0, -4.0), (5.0, 1.0)),
            AabbObstacle((4.0, 0.0), (1.0, 3.0)), AabbObstacle((-4.0, 0.0), (1.0, 3.0))]
    out = generate_expert_path(Workspace(2, ring), scenario_robot("s2D"), np.array([-15.0, 0.0]),
                               np.array([0.0, 0.0]), budget=500)
    assert out is None


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    build_dataset(DatasetManifest(**SMALL), root / "a", workers=1)
    return root


def test_dataset_counts_and_layout(small_dataset):
    ds = load_dataset(small_dataset / "a")
    man = ds.manifest
    assert len(man.train_seeds) == 2 and len(man.unseen_seeds) == 1
    assert not set(man.train_seeds) & set(man.unseen_seeds)
    assert sum(len(v) for v in ds.paths.values()) == 6
    assert all(len(ds.paths[s]) == 3 for s in man.train_seeds)
    assert len(list(ds.problems("seen"))) == 4
    assert len(list(ds.problems("unseen"))) == 2
    assert len(list((small_dataset / "a" / "cae_clouds").glob("*.f32bin"))) == 3
    for seed in man.train_seeds + man.unseen_seeds:
        assert (small_dataset / "a" / "workspaces" / f"ws_{seed}.json").exists()
        assert ds.clouds[seed].shape == (1400, 2)


def test_dataset_regeneration_is_byte_identical(small_dataset):
    build_dataset(DatasetManifest(**SMALL), small_dataset / "b", workers=2)
    assert files(small_dataset / "a") == files(small_dataset / "b")
    h = manifest_hash(small_dataset / "a" / "manifest.json")
    assert load_dataset(small_dataset / "a").manifest_hash == h
    assert load_dataset(small_dataset / "b").manifest_hash == h


def test_n_limit_matches_scan_of_path_files(small_dataset):
    longest = 0
    for f in (small_dataset / "a" / "paths").rglob("path_*.json"):
        longest = max(longest, len(json.loads(f.read_text())["configs"]))
    ds = load_dataset(small_dataset / "a")
    assert compute_n_limit([p for _, p in ds.training_paths()]) == longest


def test_split_violation_is_hard_error(small_dataset, tmp_path):
    with pytest.raises(ConfigurationError):
        DatasetManifest(train_seeds=[1, 2], unseen_seeds=[2])
    root = tmp_path / "bad"
    root.mkdir()
    data = json.loads((small_dataset / "a" / "manifest.json").read_text())
    data["unseen_seeds"] = data["train_seeds"][:1]
    (root / "manifest.json").write_text(json.dumps(data))
    with pytest.raises(ConfigurationError):
        load_dataset(root)


def test_corrupted_path_rejected_on_load(small_dataset, tmp_path):
    root = tmp_path / "c"
    shutil.copytree(small_dataset / "a", root)
    ds = load_dataset(root)
    seed = ds.manifest.train_seeds[0]
    ob = ds.workspaces[seed].obstacles[0]
    f = root / "paths" / f"ws_{seed}" / "path_0.json"
    data = json.loads(f.read_text())
    data["configs"].insert(1, list(map(float, ob.center)))
    f.write_text(json.dumps(data))
    with pytest.raises(FormatError):
        load_dataset(root)


def test_manifest_validation_and_full_scale():
    big = DatasetManifest.full_scale()
    assert (big.train_workspaces, big.paths_per_workspace) == (100, 4000)
    assert (big.unseen_workspaces, big.unseen_pairs) == (10, 2000)
    assert len(set(big.train_seeds)) == 100
    with pytest.raises(ContractError):
        DatasetManifest(paths_per_workspace=0)
    with pytest.raises(ContractError):
        DatasetManifest(scenario="maze")
