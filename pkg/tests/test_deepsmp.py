import numpy as np
import pytest

from neuroplan.bench import solvable_suite
from neuroplan.cae import CaeSpec, build_cae
from neuroplan.deepsmp import (
    DeepSmpConfig, compute_n_limit, default_n_limit, deepsmp_plan, deepsmp_plan_bidirectional,
    neural_chain,
)
from neuroplan.errors import ConfigurationError, ContractError
from neuroplan.geometry import (
    AabbObstacle, RobotModel, Workspace, is_motion_free, sample_point_cloud,
)
from neuroplan.sampler import (
    SamplerSpec, build_sampler, frozen, make_training_pairs, train_sampler,
)
from neuroplan.smp import GOAL, NEURAL, UNIFORM, PlannerParams, Problem, plan_rrt_star

P2 = RobotModel("point2")
TINY = (16,) * 11


def stepper(dx, latent=0):
    """A residual sampler that always moves by exactly dx."""
    m = build_sampler(SamplerSpec(2, latent, hidden=TINY), np.random.default_rng(0))
    m.layers[-1].weights[:] = 0
    m.layers[-1].bias[:] = np.asarray(dx, float) / m.meta["output_scale"]
    return m


def untrained(latent=28, seed=0):
    rng = np.random.default_rng(seed)
    enc, _ = build_cae(CaeSpec(2), rng)
    return enc, build_sampler(SamplerSpec(2, latent), rng)


def corridor():
    return Workspace(2, [AabbObstacle(np.array([0.0, 4.0]), np.array([14.0, 2.5])),
                         AabbObstacle(np.array([0.0, -4.0]), np.array([14.0, 2.5]))])


def test_zero_n_limit_is_plain_rrt_star():
    ws = corridor()
    pb = Problem(np.array([-17.0, 0.0]), np.array([17.0, 0.0]), ws, P2)
    params = PlannerParams(max_iterations=2000)
    for seed in range(3):
        ref = plan_rrt_star(pb, params.with_(seed=seed))
        cfg = DeepSmpConfig(None, None, params, n_limit=0)
        for fn in (deepsmp_plan, deepsmp_plan_bidirectional):
            res = fn(pb, cfg, seed=seed)
            assert np.array_equal(res.history, ref.history)
            assert np.array_equal(res.path, ref.path)


def test_goal_reset_chain_oracle():
    m = frozen(stepper([1.0, 0.0]))
    out = neural_chain(m, np.zeros(0), [0.0, 0.0], [5.0, 0.0], 9, np.random.default_rng(0), 1.0)
    # the 4th sample lies within the goal ball, so the next input is x_init again
    assert np.allclose(out[:, 0], [1, 2, 3, 4, 1, 2, 3, 4, 1])


def test_bidirectional_chains_alternate_and_clamp():
    m = frozen(stepper([1.0, 0.0]))
    out = neural_chain(m, np.zeros(0), [0.0, 0.0], [5.0, 0.0], 40, np.random.default_rng(0),
                       1.0, bidirectional=True)
    fwd, back = out[0::2, 0], out[1::2, 0]
    assert np.allclose(fwd[:5], [1, 2, 3, 4, 1])
    # the reverse chain starts at x_goal and walks away from x_init until clamped
    assert np.allclose(back[:3], [6, 7, 8])
    assert np.all(np.abs(out) <= 20.0) and back[-1] == 20.0


def test_phase_boundary_and_success_with_untrained_sampler():
    enc, samp = untrained()
    params = PlannerParams(max_iterations=3000)
    for k, pb in enumerate(solvable_suite("s2D", 4, seed=11)):
        cloud = sample_point_cloud(pb.ws, seed=k)
        cfg = DeepSmpConfig(enc, samp, params, n_limit=100)
        res = deepsmp_plan(pb, cfg, cloud, seed=k)
        assert res.found
        assert res.trace[:100] == [NEURAL] * 100
        assert set(res.trace[100:]) <= {UNIFORM, GOAL}
        for a, b in zip(res.path[:-1], res.path[1:]):
            assert is_motion_free(pb.ws, P2, a, b, resolution=0.05)


def test_uniform_tail_only_helps():
    enc, samp = untrained(seed=1)
    params = PlannerParams(max_iterations=1500)
    hybrid = trunc = 0
    for k, pb in enumerate(solvable_suite("s2D", 3, seed=12)):
        cloud = sample_point_cloud(pb.ws, seed=k)
        for seed in range(5):
            hybrid += deepsmp_plan(pb, DeepSmpConfig(enc, samp, params, 100), cloud, seed).found
            cut = DeepSmpConfig(enc, samp, params, 100, uniform_tail=False)
            trunc += deepsmp_plan(pb, cut, cloud, seed).found
    assert hybrid >= trunc and hybrid > 0


def test_configuration_errors():
    enc, samp = untrained()
    ws = Workspace(2, [AabbObstacle(np.zeros(2), np.ones(2))])
    pb = Problem(np.array([-10.0, 0.0]), np.array([10.0, 0.0]), ws, P2)
    params = PlannerParams(max_iterations=500)
    cloud = sample_point_cloud(pb.ws, seed=0)
    with pytest.raises(ConfigurationError):
        deepsmp_plan(pb, DeepSmpConfig(enc, None, params, 10), cloud)
    with pytest.raises(ConfigurationError):
        deepsmp_plan(pb, DeepSmpConfig(None, samp, params, 10), cloud)
    with pytest.raises(ConfigurationError):
        deepsmp_plan(pb, DeepSmpConfig(enc, samp, params, 10), None)
    three = build_sampler(SamplerSpec(3, 0, hidden=TINY), np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        deepsmp_plan(pb, DeepSmpConfig(None, three, params, 10))
    with pytest.raises(ContractError):
        DeepSmpConfig(enc, samp, params, n_limit=500)
    with pytest.raises(ContractError):
        DeepSmpConfig(enc, samp, params, n_limit=-1)


def test_compute_n_limit():
    paths = [np.zeros((k, 2)) for k in (3, 7, 5)]
    assert compute_n_limit(paths) == 7
    assert compute_n_limit([np.zeros((2, 2))]) == 2
    assert default_n_limit(paths, 10) == 5
    with pytest.raises(ContractError):
        compute_n_limit([])


# -- corridor: a trained sampler beats uniform sampling -------------------------------

def corridor_paths(n, seed, spacing=1.0):
    # waypoints two steering steps apart: with spacing equal to the step, a
    # single tree fed by two alternating streams advances only every other
    # iteration and the bidirectional variant needs twice the samples
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        a = np.array([rng.uniform(-19, -15), rng.uniform(-1, 1)])
        b = np.array([rng.uniform(15, 19), rng.uniform(-1, 1)])
        if rng.random() < 0.5:
            a, b = b, a
        k = int(np.ceil(np.linalg.norm(b - a) / spacing))
        out.append((0, a + (b - a) * (np.arange(k + 1) / k)[:, None]))
    return out


@pytest.fixture(scope="module")
def corridor_model():
    pairs = make_training_pairs(corridor_paths(40, 0), {})
    spec = SamplerSpec(2, 0, hidden=(32,) * 11, p=0.1)
    m, _ = train_sampler(spec, pairs, epochs=30, batch_size=32, seed=0)
    return m


def _first_solution_medians(model, bidirectional_too=False):
    ws = corridor()
    params = PlannerParams(max_iterations=4000)
    cfg = DeepSmpConfig(None, model, params, n_limit=150)
    rng = np.random.default_rng(99)
    uni, neu, bi = [], [], []
    for seed in range(50):
        a = np.array([rng.uniform(-19, -16), rng.uniform(-1, 1)])
        b = np.array([rng.uniform(16, 19), rng.uniform(-1, 1)])
        pb = Problem(a, b, ws, P2)
        inf = params.max_iterations + 1
        r = plan_rrt_star(pb, params.with_(seed=seed), stop_cost=1e300)
        uni.append(r.first_solution if r.found else inf)
        r = deepsmp_plan(pb, cfg, seed=seed, stop_cost=1e300)
        neu.append(r.first_solution if r.found else inf)
        if bidirectional_too:
            r = deepsmp_plan_bidirectional(pb, cfg, seed=seed, stop_cost=1e300)
            bi.append(r.first_solution if r.found else inf)
    return np.median(uni), np.median(neu), np.median(bi) if bi else None


def test_trained_sampler_reaches_goal_sooner_in_corridor(corridor_model):
    uni, neu, bi = _first_solution_medians(corridor_model, bidirectional_too=True)
    assert neu < uni
    assert bi <= 1.1 * neu
