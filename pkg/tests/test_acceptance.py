"""Acceptance criteria, one test per criterion at the stated tolerance.

Run with ``pytest tests/test_acceptance.py -v``; a PASS/FAIL line per
criterion is printed in the terminal summary.
"""

import time

import numpy as np
import pytest

from torusctl.cli import main
from torusctl.experiments import barrier_test
from torusctl.fields import hormander_scan, lie_bracket
from torusctl.flow import flow_map
from torusctl.manifold import distance
from torusctl.recurrence import (
    GridDiscretization,
    approximate_minimal_set,
    build_chain_graph,
    chain_recurrent_cells,
    minimal_passage_check,
    nonwandering_indicator,
    random_disturbed_trajectories,
)
from torusctl.synthesis import euler_decay, global_steer, quadratic_commutation_gap
from torusctl.systems import eta

TWO_PI = 2 * np.pi


def _circ(a):
    return np.abs((a + np.pi) % TWO_PI - np.pi)


@pytest.mark.criterion(1, "bracket rank 2 on the 64x64 grid at depth 2")
def test_criterion_1_hormander(gated, record_property):
    t0 = time.perf_counter()
    scan = hormander_scan(gated.fields, 64, 2, 1e-8)
    elapsed = time.perf_counter() - t0
    record_property("min_rank", scan.min_rank)
    record_property("seconds", round(elapsed, 2))
    assert scan.ranks.size == 64 * 64
    assert scan.min_rank == 2
    assert elapsed < 10.0


@pytest.mark.criterion(2, "drift-free fields lose rank in the dead band")
def test_criterion_2_drift_free(gated, record_property):
    scan = hormander_scan(gated.fields, 64, 2, 1e-8, drop_first=True)
    y = scan.points[:, 1]
    band = (y >= np.pi / 4 + 0.05) & (y <= 3 * np.pi / 4 - 0.05)
    alive = eta(y) > 0.05
    record_property("band_cells", int(band.sum()))
    record_property("band_ranks", sorted(set(scan.ranks[band].tolist())))
    record_property("alive_ranks", sorted(set(scan.ranks[alive].tolist())))
    assert band.sum() > 0 and alive.sum() > 0
    assert np.all(scan.ranks[band] == 1)
    assert np.all(scan.ranks[alive] == 2)


@pytest.mark.criterion(3, "chain graph is one SCC covering every cell")
def test_criterion_3_chain_transitive(gated, record_property):
    grid = GridDiscretization.of(64)
    g = build_chain_graph(gated.V, grid, delta_chain=2 * grid.cell_radius, tau_step=1.0, dt=2e-2)
    n_scc, labels = g.scc
    record_property("scc_count", int(n_scc))
    record_property("recurrent_cells", len(chain_recurrent_cells(g)))
    assert n_scc == 1
    assert len(chain_recurrent_cells(g)) == 64 * 64
    assert len(np.unique(labels)) == 1


@pytest.mark.criterion(4, "1000 random controls stay in the barrier band")
def test_criterion_4_barrier(record_property):
    rep = barrier_test(num_trials=1000, u_max=10.0, T=50.0, dt=1e-3, seed=0)
    lo, hi = 3 * np.pi / 4 - 1e-3, 5 * np.pi / 4 + 1e-3
    record_property("y_range", [round(rep.y_min, 6), round(rep.y_max, 6)])
    record_property("violations", int(np.sum((rep.per_trial_min < lo) | (rep.per_trial_max > hi))))
    assert rep.num_trials == 1000
    assert np.all(rep.per_trial_min >= lo)
    assert np.all(rep.per_trial_max <= hi)


@pytest.fixture(scope="module")
def irrational_setup(irrational):
    g = build_chain_graph(irrational.drift, GridDiscretization.of(32), dt=2e-2)
    ms = approximate_minimal_set(irrational.drift, GridDiscretization.of(16), T_long=20.0, dt=2e-2)
    pairs = np.random.default_rng(2024).random((20, 2, 2)) * TWO_PI
    return g, ms, pairs


@pytest.mark.criterion(5, "small-control steering on the irrational flow, 20/20 at eps 0.1 and 0.01")
def test_criterion_5_small_control_steering(irrational, irrational_setup, record_property):
    g, ms, pairs = irrational_setup
    for eps in (0.1, 0.01):
        ok, worst_err, worst_bound = 0, 0.0, 0.0
        for p, q in pairs:
            # every point is minimal here, so the passage time is 0 and the
            # waypoint spacing falls back to its floor
            r = global_steer(irrational.drift, irrational.controls, p, q, "small", graph=g, min_set=ms, eps=eps,
                             passage_time=0.0)
            worst_err = max(worst_err, r.endpoint_error)
            worst_bound = max(worst_bound, r.plan.control_bound)
            ok += int(r.endpoint_error < 1e-2 and r.plan.control_bound <= eps + 1e-6)
        record_property(f"eps={eps}", f"{ok}/20 err<={worst_err:.1e} bound<={worst_bound:.3g}")
        assert ok == 20


@pytest.mark.criterion(6, "commutation gap is quadratic in theta")
def test_criterion_6_quadratic_gap(gated, record_property):
    est = quadratic_commutation_gap(gated.V, gated.X1, 0.5, [0.2, 0.1, 0.05, 0.025], [np.pi / 2, np.pi / 2])
    # dual route: slope from the raw gaps by an independent two-point fit
    thetas = np.array([0.2, 0.1, 0.05, 0.025])
    pairwise = np.diff(np.log(est.gaps)) / np.diff(np.log(thetas))
    record_property("slope", round(est.order, 4))
    record_property("pairwise", np.round(pairwise, 3).tolist())
    assert 1.8 <= est.order <= 2.2
    assert np.all((pairwise >= 1.8) & (pairwise <= 2.2))


@pytest.mark.criterion(7, "Euler composition error decays like 1/N")
def test_criterion_7_euler_decay(gated, record_property):
    errs, ratios = euler_decay(gated.V, gated.X1, 0.5, 0.4, [1, 2, 4, 8, 16], [np.pi / 2, np.pi / 2], 1e-3)
    record_property("ratios", np.round(ratios, 3).tolist())
    assert len(ratios) == 4
    assert np.all((ratios >= 1.5) & (ratios <= 2.5))


@pytest.mark.criterion(8, "100 disturbed trajectories pass near the stationary set")
def test_criterion_8_passage(gated, gated_min_set, record_property):
    trajs = random_disturbed_trajectories(gated.V, 100, 0.05, 100.0, dt=1e-2, seed=8)
    approx = sum(minimal_passage_check(t, gated_min_set, 0.3)[0] for t in trajs)
    # exact stationary set {x=0} u {y=0} u {y=pi}
    exact = sum(
        bool(np.any(np.minimum.reduce([_circ(t.points[:, 0]), _circ(t.points[:, 1]),
                                       _circ(t.points[:, 1] - np.pi)]) <= 0.3))
        for t in trajs
    )
    record_property("approximate_set", f"{approx}/100")
    record_property("exact_set", f"{exact}/100")
    assert approx == 100
    assert exact == 100


@pytest.mark.criterion(9, "chain recurrent but wandering point on the circle")
def test_criterion_9_taxonomy(circle, record_property):
    g = build_chain_graph(circle.drift, GridDiscretization.of(128, 1))
    n_cr = len(chain_recurrent_cells(g))
    nw_pi = nonwandering_indicator(circle.drift, [np.pi], 0.1, 50.0)
    nw_0 = nonwandering_indicator(circle.drift, [0.0], 0.1, 50.0)
    record_property("chain_recurrent", f"{n_cr}/128")
    record_property("nonwandering_pi", nw_pi)
    record_property("nonwandering_0", nw_0)
    assert n_cr == 128
    assert not nw_pi
    assert nw_0


def _cli_outputs(tmp_path, tag, argv, cfg):
    out = tmp_path / tag
    cfg_path = tmp_path / f"{tag}.yaml"
    cfg_path.write_text(cfg)
    code = main(argv + ["-c", str(cfg_path), "--out-dir", str(out), "--seed", "11"])
    return code, {p.name: p.read_bytes() for p in sorted(out.iterdir())}


@pytest.mark.criterion(10, "RK4 order, bracket identities and CLI determinism")
def test_criterion_10_hygiene(gated, tmp_path, record_property):
    x0 = np.array([1.0, 0.5])
    ref = flow_map(gated.V, 2.0, x0, dt=1e-4)
    errs = [distance(flow_map(gated.V, 2.0, x0, dt=dt), ref) for dt in (0.1, 0.05, 0.025)]
    factors = [a / b for a, b in zip(errs, errs[1:])]

    x = np.random.default_rng(10).random((200, 2)) * TWO_PI
    F, G, H = gated.fields
    anti = max(np.abs(lie_bracket(A, B)(x) + lie_bracket(B, A)(x)).max() for A, B in [(F, G), (F, H), (G, H)])
    jacobi = np.abs(
        lie_bracket(F, lie_bracket(G, H))(x) + lie_bracket(G, lie_bracket(H, F))(x)
        + lie_bracket(H, lie_bracket(F, G))(x)
    ).max()

    runs = {
        "rank": (["rank"], "resolution: 32\n"),
        "chain": (["chain"], "resolution: 32\n"),
        "flow": (["flow", "--x0", "1,0.5"], "flow: {T: 5.0}\n"),
        "steer": (["steer", "--p", "0.3,5", "--q", "4,1"],
                  "system: irrational\nresolution: 32\nsteer: {passage_time: 2.0, min_set_resolution: 16, T_long: 20.0}\n"),
        "counterexample": (["counterexample"],
                           "resolution: 32\nbarrier: {trials: 16, T: 5.0, dt: 0.01}\nsteer: {passage_time: 2.0}\n"),
    }
    same = {}
    for name, (argv, cfg) in runs.items():
        a = _cli_outputs(tmp_path, f"{name}_a", argv, cfg)
        b = _cli_outputs(tmp_path, f"{name}_b", argv, cfg)
        same[name] = a == b and len(a[1]) > 0

    record_property("rk4_factors", np.round(factors, 2).tolist())
    record_property("antisymmetry", f"{anti:.1e}")
    record_property("jacobi", f"{jacobi:.1e}")
    record_property("cli_identical", sorted(k for k, v in same.items() if v))
    assert all(8.0 <= f <= 32.0 for f in factors)
    assert anti <= 1e-8
    assert jacobi <= 1e-5
    assert all(same.values())
