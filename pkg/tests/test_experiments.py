import numpy as np
import pytest

from torusctl.experiments import (
    BARRIER_HIGH,
    BARRIER_LOW,
    DEAD_BANDS,
    adversarial_descent,
    barrier_test,
    barrier_tolerance,
    chain_transitive_route,
    in_dead_band,
    noncontrollability_demo,
    stationary_set_certificate,
    verify_hormander_gated,
)
from torusctl.flow import verify_delta_solution
from torusctl.manifold import distance


def test_stationary_certificate():
    cert = stationary_set_certificate(n=999, seed=3)
    assert cert["on_ok"] and cert["off_ok"]
    assert cert["on_max_norm"] <= 1e-12
    assert cert["n_off"] > 900


def test_dead_band_membership():
    assert in_dead_band(np.pi / 2) and in_dead_band(3 * np.pi / 2)
    assert not in_dead_band(np.pi) and not in_dead_band(0.0)
    assert DEAD_BANDS[0][1] == pytest.approx(BARRIER_LOW)


@pytest.fixture(scope="module")
def hormander():
    return verify_hormander_gated(resolution=64)


def test_hormander_full_rank(hormander):
    assert hormander.min_rank == 2 and hormander.ok


def test_hormander_depth_zero_on_origin_line(hormander):
    # V vanishes at x = 0 so {V, X1} alone spans one direction there
    assert hormander.rank_at_origin_line == 1


def test_hormander_drift_free_dead_bands(hormander):
    assert hormander.drift_free_rank_in_band == 1
    runs = hormander.dead_band_locus()
    assert len(runs) == 2
    for (lo, hi), (blo, bhi) in zip(sorted(runs), DEAD_BANDS):
        assert abs(lo - blo) <= 2 * np.pi / 64 + 1e-12
        assert abs(hi - bhi) <= 2 * np.pi / 64 + 1e-12


def test_hormander_depth_check():
    with pytest.raises(ValueError):
        verify_hormander_gated(resolution=8, depth=1)


def test_route_trivial():
    law, traj = chain_transitive_route([1.0, 2.0], [1.0, 2.0], 0.1)
    assert traj.meta["verified"] and distance(traj.end, [1.0, 2.0]) < 1e-12


@pytest.mark.parametrize(
    "p, q, eps",
    [
        ([0.0, np.pi], [0.0, 0.0], 0.05),
        ([np.pi, np.pi / 2], [np.pi / 2, 3 * np.pi / 2], 0.1),
        ([2.0, 1.0], [5.0, 4.0], 0.1),
        ([1.0, 3.0], [4.0, np.pi], 0.05),
    ],
)
def test_route_is_delta_solution(gated, p, q, eps):
    law, traj = chain_transitive_route(p, q, eps, dt=1e-2)
    assert distance(traj.points[0], p) < 1e-12
    assert distance(traj.end, q) < 1e-6
    # independent check with the default verification tolerance
    ok, worst = verify_delta_solution(traj, gated.V, eps + 1e-6)
    assert ok, worst
    assert law.bound <= eps + 1e-12


def test_route_rejects_bad_eps():
    with pytest.raises(ValueError):
        chain_transitive_route([0, 0], [1, 1], 0.0)


def test_barrier_tolerance_not_vacuous():
    assert barrier_tolerance(10.0, 1e-3) == pytest.approx(1e-3)
    assert barrier_tolerance(10.0, 0.1) < 2e-3


def test_barrier_zero_control():
    rep = barrier_test(num_trials=4, u_max=0.0, T=5.0, dt=1e-2)
    assert rep.ok and rep.y_min == pytest.approx(np.pi) and rep.y_max == pytest.approx(np.pi)


def test_barrier_small_batch():
    rep = barrier_test(num_trials=32, T=10.0, dt=1e-2, seed=1)
    assert rep.ok
    assert BARRIER_LOW - rep.tolerance <= rep.y_min and rep.y_max <= BARRIER_HIGH + rep.tolerance


def test_barrier_batching_independent():
    a = barrier_test(num_trials=8, T=4.0, dt=1e-2, seed=5)
    b = barrier_test(num_trials=3, T=4.0, dt=1e-2, seed=5)
    np.testing.assert_array_equal(a.per_trial_min[:3], b.per_trial_min)


def test_barrier_csv(tmp_path):
    rep = barrier_test(num_trials=3, T=1.0, dt=1e-2)
    rep.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().count("\n") == 4


def test_barrier_bad_args():
    with pytest.raises(ValueError):
        barrier_test(num_trials=0)


def test_adversarial_descent_stalls_above_edge():
    out = adversarial_descent(T=20.0, dt=1e-2)
    assert BARRIER_LOW < out["y_final"] < np.pi
    assert out["y_min"] >= BARRIER_LOW


@pytest.mark.slow
def test_noncontrollability_demo():
    rep = noncontrollability_demo()
    for mode in ("small", "scaled"):
        f = rep.failures[mode]
        assert f["failed"] and f["kind"] == "local"
        assert f["band_gap"] <= 0.1
    assert all(s["converged"] for s in rep.successes.values())
    assert rep.ok
