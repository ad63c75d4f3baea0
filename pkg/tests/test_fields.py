import numpy as np
import pytest

from torusctl.fields import (
    VectorField,
    bracket_rank,
    combine,
    constant_field,
    enumerate_words,
    hormander_scan,
    jacobian_fd,
    lie_bracket,
    zero_field,
)
from torusctl.systems import eta


def without_jac(F):
    return VectorField(F.name, F.func, F.dim)


def test_jacobian_constant_is_zero():
    F = constant_field([1.0, 2.0])
    np.testing.assert_array_equal(jacobian_fd(F, [0.3, 0.4]), np.zeros((2, 2)))


def test_jacobian_of_drift(gated):
    # analytic partials: d/dx = sin x sin y, d/dy = (1 - cos x) cos y
    x = np.array([np.pi / 2, np.pi / 2])
    expected = np.array([[0.0, 0.0], [1.0, 0.0]])
    np.testing.assert_allclose(gated.V.jacobian(x), expected, atol=1e-15)
    np.testing.assert_allclose(jacobian_fd(gated.V, x, h=1e-4), expected, atol=1e-6)


def test_jacobian_sin_on_circle():
    F = VectorField("s", lambda x: np.sin(x), 1)
    np.testing.assert_allclose(jacobian_fd(F, [0.0]), [[1.0]], atol=1e-10)


def test_analytic_jacobian_matches_fd_second_order(gated, rng):
    for x in rng.random((10, 2)) * 2 * np.pi:
        e1 = np.abs(jacobian_fd(gated.V, x, 1e-3) - gated.V.jacobian(x)).max()
        e2 = np.abs(jacobian_fd(gated.V, x, 5e-4) - gated.V.jacobian(x)).max()
        if e1 > 1e-10:
            assert 3.0 <= e1 / e2 <= 5.0


def test_periodicity(gated, rng):
    x = rng.random((20, 2)) * 2 * np.pi
    for F in gated.fields:
        for i in range(2):
            shift = np.zeros(2)
            shift[i] = 2 * np.pi
            np.testing.assert_allclose(F(x + shift), F(x), atol=1e-12)


def test_bracket_with_itself_vanishes(gated, rng):
    B = lie_bracket(gated.V, gated.V)
    np.testing.assert_allclose(B(rng.random((10, 2)) * 6), 0.0, atol=1e-14)


def test_first_bracket_value(gated):
    # [V, X1] = DX1 V - DV X1 = -(sin x sin y, ...) in y
    B = lie_bracket(gated.V, gated.X1)
    np.testing.assert_allclose(B([np.pi / 2, np.pi / 2]), [0.0, -1.0], atol=1e-14)
    np.testing.assert_allclose(B([0.0, np.pi / 2]), [0.0, 0.0], atol=1e-14)


def test_second_bracket_value(gated):
    BB = lie_bracket(lie_bracket(gated.V, gated.X1), gated.X1)
    np.testing.assert_allclose(np.abs(BB([0.0, np.pi / 2])), [0.0, 1.0], atol=1e-8)


def test_antisymmetry(gated, rng):
    x = rng.random((50, 2)) * 2 * np.pi
    for F, G in [(gated.V, gated.X1), (gated.V, gated.X2), (gated.X1, gated.X2)]:
        np.testing.assert_allclose(lie_bracket(F, G)(x), -lie_bracket(G, F)(x), atol=1e-8)


def test_jacobi_identity(gated, rng):
    F, G, H = gated.V, gated.X1, gated.X2
    x = rng.random((20, 2)) * 2 * np.pi
    total = (
        lie_bracket(F, lie_bracket(G, H))(x)
        + lie_bracket(G, lie_bracket(H, F))(x)
        + lie_bracket(H, lie_bracket(F, G))(x)
    )
    assert np.abs(total).max() <= 1e-5


def test_fd_bracket_converges_second_order(gated):
    x = np.array([0.7, 1.1])
    exact = lie_bracket(gated.V, gated.X1)(x)
    V = without_jac(gated.V)
    X1 = without_jac(gated.X1)
    e1 = np.abs(lie_bracket(V, X1, h=1e-2)(x) - exact).max()
    e2 = np.abs(lie_bracket(V, X1, h=5e-3)(x) - exact).max()
    assert 3.0 <= e1 / e2 <= 5.0


def test_word_counts():
    assert [w.label(["X1", "X2"]) for w in enumerate_words(2, 0)] == ["X1", "X2"]
    assert len(enumerate_words(2, 1)) == 3
    assert len(enumerate_words(3, 1)) == 6
    labels = [w.label(["A", "B"]) for w in enumerate_words(2, 1)]
    assert "[A,A]" not in labels and "[B,A]" not in labels


def test_bracket_rank_examples(gated):
    assert bracket_rank(gated.fields, [np.pi / 2, np.pi / 2], 0).rank == 2
    assert bracket_rank([gated.X1], [1.0, 2.0], 2).rank == 1
    assert bracket_rank([gated.V, gated.X1], [0.0, np.pi / 2], 0).rank == 1
    assert bracket_rank([gated.V, gated.X1], [0.0, np.pi / 2], 2).rank == 2


def test_bracket_rank_scale_invariant(gated, rng):
    for x in rng.random((10, 2)) * 2 * np.pi:
        r = bracket_rank(gated.fields, x, 2).rank
        scaled = [gated.V.scaled(-3.0), gated.X1.scaled(0.25), gated.X2.scaled(7.0)]
        assert bracket_rank(scaled, x, 2).rank == r


def test_rank_tol_must_be_positive(gated):
    with pytest.raises(ValueError):
        bracket_rank(gated.fields, [0, 0], 1, tol=0.0)


def test_scan_constant_fields():
    V = constant_field([1.0, np.sqrt(2)], "V")
    X = constant_field([1.0, 0.0], "X1")
    for n in (2, 5, 16):
        assert hormander_scan([V, X], n, 0).min_rank == 2


def test_scan_drift_free_band(gated):
    inner = lambda p: (p[:, 1] >= np.pi / 4 + 0.1) & (p[:, 1] <= 3 * np.pi / 4 - 0.1)
    for depth in (0, 1, 2, 3):
        scan = hormander_scan(gated.fields, 32, depth, drop_first=True, region=inner)
        assert scan.ranks.size > 0 and np.all(scan.ranks == 1)


def test_scan_rejects_bad_resolution(gated):
    with pytest.raises(ValueError):
        hormander_scan(gated.fields, 1)


def test_scan_csv(tmp_path, gated):
    scan = hormander_scan(gated.fields, 4, 1)
    scan.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "x,y,rank,sigma_min"
    assert len(lines) == 17


def test_combine_keeps_analytic_jacobian(gated):
    F = combine([1.0, -0.5], [gated.V, gated.X2])
    x = np.array([1.0, 3.0])
    np.testing.assert_allclose(F(x), gated.V(x) - 0.5 * gated.X2(x))
    assert F.jac is not None
    np.testing.assert_allclose(F.jacobian(x), gated.V.jacobian(x) - 0.5 * gated.X2.jacobian(x))


def test_zero_field():
    Z = zero_field(3)
    np.testing.assert_array_equal(Z(np.ones((4, 3))), np.zeros((4, 3)))


def test_eta_values():
    assert eta(np.pi / 2) == 0.0
    assert eta(np.pi) == pytest.approx(np.exp(-1.0), rel=1e-14)
    assert eta(np.pi / 4) == 0.0
    assert 0.0 <= eta(np.pi / 4 - 1e-3) < 1e-200
    y = np.linspace(0, 2 * np.pi, 10001)
    assert np.all(eta(y) >= 0)


def test_eta_support():
    y = np.linspace(0, 2 * np.pi, 20001)[:-1]
    c = np.cos(2 * y)
    # positive only where cos 2y > 0; strictly positive once clear of underflow
    assert np.all(c[eta(y) > 0] > 0)
    assert np.all(eta(y[c > 1e-2]) > 0)
    inside = (y < np.pi / 4 - 0.01) | ((y > 3 * np.pi / 4 + 0.01) & (y < 5 * np.pi / 4 - 0.01)) | (y > 7 * np.pi / 4 + 0.01)
    outside = ((y > np.pi / 4) & (y < 3 * np.pi / 4)) | ((y > 5 * np.pi / 4) & (y < 7 * np.pi / 4))
    assert np.all(eta(y[inside]) > 0)
    assert np.all(eta(y[outside]) == 0)


def test_eta_smooth_across_edges():
    # difference quotients near each edge vanish like O(h) from both sides
    for edge in (np.pi / 4, 3 * np.pi / 4, 5 * np.pi / 4, 7 * np.pi / 4):
        for h in (1e-2, 5e-3):
            y = edge + h * np.arange(-3, 4)
            d1 = np.diff(eta(y)) / h
            d2 = np.diff(eta(y), 2) / h**2
            assert np.abs(d1).max() <= 10 * h
            assert np.abs(d2).max() <= 10 * h
