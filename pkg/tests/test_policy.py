import math

import numpy as np
import pytest

from mindmeld import policy as pol
from mindmeld.demonstrators import StyleProfile
from mindmeld.world import CarState, Rect, World, random_world

ORACLE = StyleProfile(0, 0, 1.0, 0.0)
CFG = pol.PolicyConfig()


def open_world(seed):
    return random_world(np.random.default_rng([seed, 5]))


def test_features_geometry():
    w = World(goal=(10.0, 0.0), bounds=Rect(-10, -10, 10, 10))
    f = pol.features(CarState(0.0, 0.0, math.pi / 2), w)
    assert f[0] == pytest.approx(-math.pi / 2)
    assert f[1] == pytest.approx(10.0 / 20.0)
    assert f[2:] == pytest.approx([1.0, 0.0], abs=1e-12)


def test_policy_output_clipped():
    p = pol.PolicyParams.init(np.random.default_rng(0))
    p.net.biases[-1].data[:] = 10.0
    assert np.all(p.act(np.zeros((3, pol.N_FEATURES))) == 2.5)


def test_fit_policy_needs_data():
    with pytest.raises(ValueError):
        pol.fit_policy(np.zeros((0, 4)), np.zeros(0), CFG, seed=0)


def test_fit_policy_nan_aborts():
    with pytest.raises(FloatingPointError):
        pol.fit_policy(np.zeros((3, 4)), np.array([0.0, np.nan, 1.0]), CFG, seed=0)


def test_cross_track_straight_is_zero():
    from mindmeld.world import Trajectory

    w = World(goal=(10.0, 0.0), bounds=Rect(-10, -10, 20, 10))
    traj = Trajectory(0.1, [CarState(float(x), 0.0, 0.0) for x in range(5)], [0.0] * 4)
    assert pol.cross_track(traj, w.goal) == 0.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_bc_on_optimal_labels_succeeds(seed):
    res = pol.run_bc(pol.StyledExpert(ORACLE, seed), open_world(seed), CFG, seed)
    assert res.condition == "BC"
    assert res.final_success >= 0.9


def test_bc_single_trajectory_runs():
    cfg = pol.PolicyConfig(demo_rollouts=1, epochs=20, eval_starts=3)
    res = pol.run_bc(pol.StyledExpert(ORACLE, 0), open_world(0), cfg, 0)
    assert 0.0 <= res.final_success <= 1.0


def test_heavy_style_hurts_bc():
    heavy = StyleProfile(1, 0, 0.3, 0.05)
    for seed in range(3):
        good = pol.run_bc(pol.StyledExpert(ORACLE, seed), open_world(seed), CFG, seed).final_success
        bad = pol.run_bc(pol.StyledExpert(heavy, seed), open_world(seed), CFG, seed).final_success
        assert bad < good


def test_oracle_dagger_and_aggregation():
    res = pol.run_dagger(pol.StyledExpert(ORACLE, 3), open_world(3), CFG, 3)
    assert res.condition == "DAGGER"
    assert len(res.success) == CFG.dagger_iters + 1
    assert res.final_success >= 0.9
    assert all(b > a for a, b in zip(res.dataset_sizes, res.dataset_sizes[1:]))


def test_zero_iterations_equals_bc():
    expert = pol.StyledExpert(StyleProfile(2, 2, 1.4), 4)
    bc = pol.run_bc(expert, open_world(4), CFG, 4)
    zero = pol.run_dagger(expert, open_world(4), CFG, 4, iterations=0)
    assert bc.success == zero.success and bc.losses == zero.losses


def test_corrector_changes_labels_only():
    expert = pol.StyledExpert(StyleProfile(2, 0, 0.3), 6)
    cfg = pol.PolicyConfig(dagger_iters=1, epochs=50, eval_starts=4)
    calls = []

    def corrector(seq):
        calls.append(len(seq))
        return seq.o  # a perfect corrector

    plain = pol.run_dagger(expert, open_world(6), cfg, 6)
    fixed = pol.run_dagger(expert, open_world(6), cfg, 6, corrector=corrector)
    assert fixed.condition == "MM_DAGGER"
    assert len(calls) == cfg.demo_rollouts + cfg.dagger_rollouts
    assert fixed.dataset_sizes[0] == plain.dataset_sizes[0]


def test_leaving_bounds_is_failure_not_error():
    w = World(goal=(25.0, 25.0), bounds=Rect(0, 0, 30, 30))
    straight = lambda s, world: 0.0  # noqa: E731
    ev = pol.evaluate(straight, w, [CarState(2.0, 2.0, math.pi)], max_steps=100)
    assert ev.success_rate == 0.0 and math.isnan(ev.mean_time)


def test_evaluation_starts_shared_between_conditions():
    w = open_world(0)
    assert pol.eval_starts(w, 5, 7) == pol.eval_starts(w, 5, 7)
