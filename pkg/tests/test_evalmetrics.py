import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.optimize import linear_sum_assignment

from straightfm.evalmetrics import (MetricReport, coupling_similarity, hungarian, resample, straightness,
                                    transport_cost, wasserstein2, wasserstein2_blocked)
from straightfm.odesolve import Trajectory, euler
from straightfm.synthdata import Rng, sample_prior

# integral over [0, 1] of |x'(t) - (x(1) - x(0))|^2 for the unit quarter circle at constant angular speed,
# from scipy.integrate.quad (agrees with pi^2/4 - 2)
QUARTER_CIRCLE_S = 0.4674011002723397


def make_traj(times, states):
    states = np.asarray(states, dtype=float)
    if states.ndim == 2:
        states = states[:, None, :]
    return Trajectory(np.asarray(times, dtype=float), states, "test", len(times) - 1)


def quarter_circle(k=1025):
    t = np.linspace(0.0, 1.0, k)
    return make_traj(t, np.stack([np.cos(np.pi * t / 2), np.sin(np.pi * t / 2)], axis=1))


# straightness


def test_two_state_trajectory_is_straight():
    rng = Rng(0)
    traj = Trajectory(np.array([0.0, 1.0]), rng.normal((2, 5, 2)), "test", 1)
    assert straightness(traj) == pytest.approx(0.0, abs=1e-24)


@pytest.mark.parametrize("m", [1, 7, 64, 200])
def test_constant_speed_line_is_straight(m):
    t = np.linspace(0.0, 1.0, 33)
    traj = make_traj(t, np.outer(t, [3.0, -1.0]) + [1.0, 2.0])
    assert straightness(traj, m) == pytest.approx(0.0, abs=1e-20)


def test_variable_speed_line_is_not_straight():
    t = np.linspace(0.0, 1.0, 65)
    assert straightness(make_traj(t, np.outer(t**2, [1.0, 0.0]))) > 0.1


def test_quarter_circle_matches_quadrature():
    f = lambda t: (1 - math.pi / 2 * math.sin(math.pi * t / 2)) ** 2 + (math.pi / 2 * math.cos(math.pi * t / 2) - 1) ** 2  # noqa: E731
    live, _ = integrate.quad(f, 0.0, 1.0, epsabs=1e-14, epsrel=1e-14)
    assert live == pytest.approx(QUARTER_CIRCLE_S, rel=1e-12)
    assert QUARTER_CIRCLE_S == pytest.approx(math.pi**2 / 4 - 2, rel=1e-12)
    assert straightness(quarter_circle(), 64) == pytest.approx(QUARTER_CIRCLE_S, rel=1e-3)


def test_resampling_removes_recording_bias():
    # sparse non-uniform recording of the same path still lands near the dense value
    t = np.sort(np.concatenate([[0.0, 1.0], Rng(1).uniform(400)]))
    sparse = make_traj(t, np.stack([np.cos(np.pi * t / 2), np.sin(np.pi * t / 2)], axis=1))
    assert straightness(sparse) == pytest.approx(straightness(quarter_circle()), rel=0.02)


def test_resample_grid_and_reverse_time():
    t = np.array([1.0, 0.6, 0.0])
    traj = make_traj(t, [[1.0, 0.0], [0.6, 0.0], [0.0, 0.0]])
    grid, pts = resample(traj, 4)
    assert grid.tolist() == [1.0, 0.75, 0.5, 0.25, 0.0]
    assert np.allclose(pts[:, 0, 0], grid)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-10, 10), st.floats(-10, 10), st.floats(0.1, 5.0))
def test_translation_invariance_and_quadratic_scaling(seed, dx, dy, c):
    rng = Rng(seed)
    states = np.cumsum(rng.normal((12, 4, 2)), axis=0)
    times = np.sort(rng.uniform(12))
    times[0], times[-1] = 0.0, 1.0
    times = np.maximum.accumulate(times + np.arange(12) * 1e-3)
    base = straightness(Trajectory(times, states, "t", 11))
    shifted = straightness(Trajectory(times, states + [dx, dy], "t", 11))
    scaled = straightness(Trajectory(times, c * states, "t", 11))
    assert shifted == pytest.approx(base, rel=1e-9)
    assert scaled == pytest.approx(c * c * base, rel=1e-9)


def test_straightness_rejects_degenerate():
    with pytest.raises(ValueError):
        straightness(make_traj([0.5, 0.5], [[0.0, 0.0], [1.0, 1.0]]))
    with pytest.raises(ValueError):
        straightness(make_traj([0.0], [[0.0, 0.0]]))


def test_straight_field_gives_zero_under_euler():
    traj = euler(lambda x, t: np.full_like(x, 2.0), sample_prior(Rng(0), 10, 2), (0.0, 1.0), 17)
    assert straightness(traj) == pytest.approx(0.0, abs=1e-20)


# hungarian / W2


def brute_force(cost):
    n = cost.shape[0]
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def test_w2_examples():
    pts = Rng(0).normal((20, 2))
    assert wasserstein2(pts, pts) == 0.0
    assert wasserstein2(pts, pts[::-1]) == 0.0
    assert wasserstein2(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])) == 5.0


def test_hungarian_matches_exhaustive_on_3x3():
    rng = Rng(1)
    for _ in range(20):
        cost = rng.uniform((3, 3))
        col = hungarian(cost)
        assert sorted(col) == [0, 1, 2]
        assert cost[np.arange(3), col].sum() == pytest.approx(brute_force(cost), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7), st.integers(0, 2**31))
def test_hungarian_optimal_small(n, seed):
    rng = Rng(seed)
    cost = rng.normal((n, n)) ** 2 * 10
    col = hungarian(cost)
    assert cost[np.arange(n), col].sum() == pytest.approx(brute_force(cost), abs=1e-9)


@pytest.mark.parametrize("n", [10, 64, 200, 512])
def test_hungarian_matches_scipy(n):
    rng = Rng(n)
    a, b = rng.normal((n, 2)), 2.0 * rng.normal((n, 2))
    cost = ((a[:, None] - b[None]) ** 2).sum(-1)
    col = hungarian(cost)
    assert len(set(col.tolist())) == n
    r, c = linear_sum_assignment(cost)
    assert cost[np.arange(n), col].sum() == pytest.approx(cost[r, c].sum(), rel=1e-12)


def test_hungarian_handles_ties_and_negative_costs():
    assert sorted(hungarian(np.zeros((5, 5)))) == list(range(5))
    cost = -np.eye(4)
    assert hungarian(cost).tolist() == [0, 1, 2, 3]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31))
def test_w2_metric_axioms(n, seed):
    rng = Rng(seed)
    a, b, c = rng.normal((n, 2)), rng.normal((n, 2)) + 1.0, 2.0 * rng.normal((n, 2))
    ab, ba = wasserstein2(a, b), wasserstein2(b, a)
    assert ab >= 0.0
    assert ab == pytest.approx(ba, abs=1e-12)
    assert wasserstein2(a, a[rng.permutation(n)]) == pytest.approx(0.0, abs=1e-12)
    assert wasserstein2(a, c) <= ab + wasserstein2(b, c) + 1e-9


def test_w2_rejects_bad_sizes():
    with pytest.raises(ValueError):
        wasserstein2(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        wasserstein2(np.zeros((513, 2)), np.zeros((513, 2)))


def test_blocked_w2_averages_blocks():
    rng = Rng(4)
    a, b = rng.normal((1000, 2)), rng.normal((1000, 2))
    blocks = np.array_split(np.arange(1000), 2)
    want = np.mean([wasserstein2(a[i], b[i]) for i in blocks])
    assert wasserstein2_blocked(a, b) == pytest.approx(want, rel=1e-12)
    assert wasserstein2_blocked(a[:100], b[:100]) == wasserstein2(a[:100], b[:100])


# transport cost


def test_transport_cost_examples():
    x = Rng(0).normal((10, 2))
    assert transport_cost(x, x) == 0.0
    assert transport_cost(np.zeros((1, 2)), np.array([[3.0, 4.0]])) == 25.0
    with pytest.raises(ValueError):
        transport_cost(np.zeros((2, 2)), np.zeros((3, 2)))


def test_transport_cost_of_independent_gaussians():
    a, b = sample_prior(Rng(1), 100_000, 2), sample_prior(Rng(2), 100_000, 2)
    assert transport_cost(a, b) == pytest.approx(4.0, abs=0.1)


# coupling similarity


def test_coupling_similarity_identical_maps():
    z = sample_prior(Rng(0), 200, 2)
    mse, base = coupling_similarity(np.tanh, np.tanh, z, Rng(1))
    assert mse == 0.0 and base > 0.0


def test_coupling_similarity_permuted_map_equals_baseline():
    z = sample_prior(Rng(0), 300, 2)
    target = np.sin(3 * z)
    perm_rng = Rng(9)
    perms = [perm_rng.permutation(300) for _ in range(16)]
    mse_each = [transport_cost(target, target[p]) for p in perms]
    _, base = coupling_similarity(lambda x: target, lambda x: target, z, Rng(9), n_perm=16)
    assert base == pytest.approx(np.mean(mse_each), rel=1e-12)


def test_coupling_similarity_detects_shared_structure():
    z = sample_prior(Rng(0), 500, 2)
    mse, base = coupling_similarity(lambda x: 2 * x, lambda x: 2 * x + 0.05, z, Rng(1))
    assert mse == pytest.approx(0.005, rel=1e-9)
    assert mse < 0.5 * base


# report


def test_report_csv(tmp_path):
    rep = MetricReport(seed=7)
    rep.add("w2", 1, 0.5, 512)
    rep.add("straightness", 100, 0.25, 512)
    path = tmp_path / "r.csv"
    rep.write_csv(path)
    assert path.read_text().splitlines() == ["metric,steps,value,n,seed", "w2,1,0.5,512,7",
                                             "straightness,100,0.25,512,7"]
    assert rep.get("w2", 1) == 0.5
    with pytest.raises(KeyError):
        rep.get("w2", 3)
    with pytest.raises(FloatingPointError):
        rep.add("cost", 1, float("nan"), 1)
