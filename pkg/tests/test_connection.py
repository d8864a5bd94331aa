import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from carrollian import presets
from carrollian.algebroid import PreconditionError, Section, is_stationary, projector
from carrollian.connection import (
    METHODS,
    ExprConnection,
    Infeasible,
    ZeroConnection,
    bianchi_residuals,
    connect,
    covariant_derivative,
    curvature,
    curvature_preserves_L_residual,
    is_L_compatible,
    make_carrollian,
    make_frame_parallel_carrollian,
    make_L_compatible,
    make_metric_compatible,
    make_torsion_free_carrollian,
    max_residuals,
    minimal_direct_sum_connection,
    nabla_sigma,
    nonmetricity,
    solver_system,
    torsion,
    torsion_on_L_residual,
)
from carrollian.fields import parse_field

from exprgen import expressions

ZERO = ZeroConnection()


def christoffel_hyperbolic(y):
    """Levi-Civita of dx^2 + dy^2 over y^2, G[c, a, b] with coordinates (x, y)."""
    G = np.zeros((2, 2, 2))
    G[0, 0, 1] = G[0, 1, 0] = -1.0 / y
    G[1, 0, 0] = 1.0 / y
    G[1, 1, 1] = -1.0 / y
    return G


def random_connection(model, seed):
    rng = np.random.default_rng(seed)
    names = model.chart.coord_names
    k = model.rank
    entries = {}
    for idx in np.ndindex(k, k, k):
        c0, c1 = (float(v) for v in rng.uniform(-1, 1, 2).round(3))
        entries[idx] = f"{c0!r} + {c1!r}*{names[int(rng.integers(len(names)))]}"
    return ExprConnection.build(model, entries, "random")


def nullspace(A, rtol=1e-10):
    _, s, Vt = np.linalg.svd(A)
    r = int(np.sum(s > rtol * s[0])) if s.size else 0
    return Vt[r:]


@pytest.fixture(scope="module")
def dsum_x():
    return presets.direct_sum(g0="1 + x^2, 0; 0, 1", X="1, 0")


class TestTensors:
    def test_covariant_derivative_constant(self, flat):
        u = Section.basis(flat, 0)
        v = Section.of(flat, ["1", "2", "3"])
        assert not covariant_derivative(flat, ZERO, u, v, (0.1, 0.2, 0.3)).any()

    def test_covariant_derivative_leibniz_on_coordinate(self, line):
        # rho_a(x) = y, so nabla_u (x e_1) = y e_1
        u = Section.of(line, ["1"])
        v = Section.of(line, ["x"])
        assert covariant_derivative(line, ZERO, u, v, (0.5, 1.5)) == pytest.approx([1.5])

    def test_sigma_geodesic_frame(self, flat):
        s = Section.of(flat, ["0", "0", "1"])
        assert not covariant_derivative(flat, ZERO, s, s, (0.0, 0.0, 0.0)).any()

    def test_torsion_gl2_zero_connection(self, gl2_algebra):
        T = torsion(gl2_algebra, ZERO, np.zeros(0))
        np.testing.assert_array_equal(T, -presets.gl2_commutator())

    def test_torsion_symmetric_gamma(self, flat):
        G = ExprConnection.build(flat, {(0, 1, 2): "x", (0, 2, 1): "x"})
        assert not torsion(flat, G, (0.3, 0.1, 0.2)).any()

    def test_nonmetricity_hand_derivative(self, nonstat):
        N = nonmetricity(nonstat, ZERO, (0.3, 0.6))
        expected = np.zeros((2, 2, 2))
        expected[1, 0, 0] = 1.2
        np.testing.assert_allclose(N, expected, atol=1e-15)

    def test_curvature_zero_connection(self, flat):
        assert not curvature(flat, ZERO, (0.1, 0.1, 0.1)).any()

    @given(st.integers(0, 10_000))
    def test_symmetries(self, seed):
        model = presets.random_model(3, 2, seed=seed % 11)
        G = random_connection(model, seed)
        x = model.chart.halton(1, seed)[0]
        T = torsion(model, G, x)
        R = curvature(model, G, x)
        N = nonmetricity(model, G, x)
        assert np.max(np.abs(T + T.transpose(0, 2, 1))) <= 1e-12
        assert np.max(np.abs(R + R.transpose(0, 1, 3, 2))) <= 1e-12
        assert np.max(np.abs(N - N.transpose(0, 2, 1))) <= 1e-12

    def test_bianchi_trivial(self, flat):
        assert bianchi_residuals(flat, ZERO, (0.1, 0.2, 0.3)) == (0.0, 0.0)

    def test_bianchi_gl2_reduces_to_jacobi(self, gl2_algebra):
        alg, diff = bianchi_residuals(gl2_algebra, ZERO, np.zeros(0))
        assert alg <= 1e-12 and diff <= 1e-12

    @given(st.integers(0, 10_000))
    def test_bianchi_random_connection(self, seed):
        model = presets.random_model(3, 2, seed=seed % 5)
        G = random_connection(model, seed)
        for x in model.chart.halton(3, seed):
            alg, diff = bianchi_residuals(model, G, x)
            assert alg <= 1e-9 and diff <= 1e-9


class TestLCompatible:
    def test_injected_term_detected(self, flat):
        G = ExprConnection.build(flat, {(0, a, 2): "1" for a in range(3)})
        res = is_L_compatible(flat, G)
        assert not res and res.residual == pytest.approx(1.0)

    def test_random_base_gives_parallel_sigma(self, flat):
        conn = make_L_compatible(flat, random_connection(flat, 3))
        worst = max(np.max(np.abs(nabla_sigma(flat, conn, x))) for x in flat.chart.halton(100, 0))
        assert worst <= 1e-10

    def test_parallel_base_is_unchanged(self, flat):
        G0 = ExprConnection.build(flat, {(0, 1, 0): "x*y", (1, 0, 1): "t"})
        conn = make_L_compatible(flat, G0)
        for x in flat.chart.halton(10, 1):
            np.testing.assert_array_equal(conn.values(flat, x), G0.values(flat, x))

    @given(expressions(("x", "y", "t"), 6))
    def test_multiples_of_sigma_stay_parallel(self, f_text):
        flat = presets.flat_carroll(3)
        conn = make_L_compatible(flat, random_connection(flat, 7))
        fs = Section.of(flat, ["0", "0", f_text])
        for x in flat.chart.halton(3, 2):
            P = projector(flat.values(x)[1])
            for a in range(3):
                v = covariant_derivative(flat, conn, Section.basis(flat, a), fs, x)
                assert np.linalg.norm(P @ v) <= 1e-10 * max(1.0, np.linalg.norm(v))


class TestMetricCompatible:
    def test_flat_zero_base(self, flat):
        conn = make_metric_compatible(flat)
        assert not conn.values(flat, (0.2, 0.3, 0.1)).any()

    def test_nonstationary(self, nonstat):
        conn = make_metric_compatible(nonstat)
        res = max_residuals(nonstat, conn, samples=100)
        assert res["nonmetricity"] <= 1e-9
        assert is_L_compatible(nonstat, conn, samples=100)

    def test_every_preset_is_carrollian(self, shipped):
        for name, model in shipped.items():
            conn = make_carrollian(model)
            res = max_residuals(model, conn, samples=32)
            assert res["nonmetricity"] <= 1e-9, name
            assert res["l_compat"] <= 1e-9, name

    def test_idempotent(self, dsum):
        conn = make_carrollian(dsum)
        again = make_carrollian(dsum, conn)
        for x in dsum.chart.halton(10, 0):
            assert np.max(np.abs(again.correction(dsum, x))) <= 1e-10

    def test_gauge_dependence(self, flat):
        a = make_carrollian(flat)
        b = make_carrollian(flat, random_connection(flat, 1))
        x = (0.1, 0.4, -0.3)
        assert np.max(np.abs(a.values(flat, x) - b.values(flat, x))) > 1e-3
        assert np.max(np.abs(nonmetricity(flat, b, x))) <= 1e-9

    def test_minimum_norm(self, dsum):
        conn = make_metric_compatible(dsum, random_connection(dsum, 5))
        for x in dsum.chart.halton(10, 3):
            A, _ = solver_system(conn, dsum, x)
            N = nullspace(A)
            GA = conn.correction(dsum, x)
            for a in range(dsum.rank):
                assert np.max(np.abs(N @ GA[:, a, :].reshape(-1))) <= 1e-10


class TestFrameParallel:
    def test_flat_zero(self, flat):
        conn = make_frame_parallel_carrollian(flat)
        assert not conn.values(flat, (0.5, 0.5, 0.5)).any()

    @pytest.mark.parametrize("fixture", ["nonstat", "dsum", "gl2_action"])
    def test_postconditions(self, request, fixture):
        model = request.getfixturevalue(fixture)
        res = max_residuals(model, make_frame_parallel_carrollian(model), samples=100)
        assert res["nonmetricity"] <= 1e-9 and res["nabla_sigma"] <= 1e-9

    def test_random_rank_three(self):
        model = presets.random_model(3, 2, seed=4)
        res = max_residuals(model, make_frame_parallel_carrollian(model, random_connection(model, 2)), samples=50)
        assert res["nonmetricity"] <= 1e-9 and res["nabla_sigma"] <= 1e-9


class TestTorsionFree:
    @pytest.mark.parametrize("fixture", ["flat", "line", "gl2_algebra"])
    def test_stationary_presets_succeed(self, request, fixture):
        model = request.getfixturevalue(fixture)
        conn = make_torsion_free_carrollian(model)
        assert not isinstance(conn, Infeasible)
        res = max_residuals(model, conn, samples=32)
        assert res["torsion"] <= 1e-9 and res["nonmetricity"] <= 1e-9
        assert is_stationary(model)

    @pytest.mark.parametrize("fixture", ["nonstat", "dsum", "gl2_action"])
    def test_nonstationary_presets_infeasible(self, request, fixture):
        model = request.getfixturevalue(fixture)
        out = make_torsion_free_carrollian(model)
        assert isinstance(out, Infeasible) and not out
        assert out.stationary is False and not is_stationary(model)
        assert out.equation_residual > 1e-8

    def test_infeasible_report(self, nonstat):
        d = make_torsion_free_carrollian(nonstat).to_dict()
        assert d["infeasible"] is True and d["is_stationary"] is False
        assert d["stationarity_residual"] > 1.0

    def test_flat_is_exact(self, flat):
        res = max_residuals(flat, make_torsion_free_carrollian(flat), samples=32)
        assert res["torsion"] <= 1e-10 and res["nonmetricity"] <= 1e-10

    def test_hyperbolic_christoffel(self, poincare):
        conn = make_torsion_free_carrollian(poincare)
        for x in poincare.chart.halton(20, 0):
            np.testing.assert_allclose(conn.values(poincare, x), christoffel_hyperbolic(x[1]), atol=1e-9, rtol=0)

    def test_hyperbolic_sectional_curvature(self, poincare):
        conn = make_torsion_free_carrollian(poincare)
        for x in poincare.chart.halton(20, 1):
            R = curvature(poincare, conn, x)
            g = poincare.values(x)[3]
            # K = g(R(e_x, e_y) e_y, e_x) / det g
            K = (g[0] @ R[:, 1, 0, 1]) / np.linalg.det(g)
            assert abs(K + 1.0) <= 1e-6

    def test_hyperbolic_bianchi(self, poincare):
        conn = make_torsion_free_carrollian(poincare)
        for x in poincare.chart.halton(20, 2):
            alg, diff = bianchi_residuals(poincare, conn, x)
            assert alg <= 1e-6 and diff <= 1e-6

    def test_minimum_norm(self, flat):
        conn = make_torsion_free_carrollian(flat, random_connection(flat, 9))
        for x in flat.chart.halton(10, 0):
            A, _ = solver_system(conn, flat, x)
            GA = conn.correction(flat, x)
            assert np.max(np.abs(nullspace(A) @ GA.transpose(1, 0, 2).reshape(-1))) <= 1e-10


class TestStructuralPropositions:
    def test_curvature_preserves_L_flat(self, flat):
        conn = make_L_compatible(flat, random_connection(flat, 4))
        assert curvature_preserves_L_residual(flat, conn, samples=100) <= 1e-9

    def test_curvature_preserves_L_nonstationary(self, nonstat):
        conn = make_carrollian(nonstat, random_connection(nonstat, 1))
        assert curvature_preserves_L_residual(nonstat, conn, samples=100) <= 1e-9

    def test_injected_term_rejected(self, flat):
        G = ExprConnection.build(flat, {(0, 0, 2): "1"})
        with pytest.raises(PreconditionError) as info:
            curvature_preserves_L_residual(flat, G)
        assert info.value.hypothesis == "L-compatible"

    @given(expressions(("x", "y"), 6), st.integers(0, 50))
    def test_torsion_on_L(self, f_text, seed):
        model = presets.random_model(3, 2, seed=seed % 5)
        conn = make_L_compatible(model, random_connection(model, seed))
        f = parse_field(f_text, model.chart)
        for x in model.chart.halton(3, seed):
            assert torsion_on_L_residual(model, conn, f, x) <= 1e-9

    def test_metric_implies_L_compatible_on_random_models(self):
        for seed in range(20):
            model = presets.random_model(3, 2, seed=seed)
            assert is_L_compatible(model, make_metric_compatible(model), samples=16), seed


class TestBianchiBattery:
    def test_every_constructed_connection(self, shipped):
        for name, model in shipped.items():
            for method in METHODS:
                if method == "minimal-direct-sum" and name not in ("direct-sum", "random"):
                    continue
                conn = connect(model, method)
                if isinstance(conn, Infeasible):
                    continue
                for x in model.chart.halton(20, 0):
                    alg, diff = bianchi_residuals(model, conn, x)
                    assert alg <= 1e-6 and diff <= 1e-6, (name, method)


class TestMinimalDirectSum:
    def test_constant_g0_gives_zero_cross_term(self):
        model = presets.direct_sum(g0="2, 0; 0, 3", X="1, 0")
        conn = minimal_direct_sum_connection(model)
        assert not conn.cross_term(model, (0.3, 0.4)).value.any()

    def test_hand_value(self, dsum_x):
        conn = minimal_direct_sum_connection(dsum_x)
        G = conn.values(dsum_x, (1.0, 0.0))
        assert G[0, 2, 0] == pytest.approx(0.5, abs=1e-14)
        for x0 in (-1.5, 0.3, 1.7):
            assert conn.values(dsum_x, (x0, 0.2))[0, 2, 0] == pytest.approx(x0 / (1 + x0 * x0), abs=1e-14)

    def test_is_carrollian(self, dsum, dsum_x):
        for model in (dsum, dsum_x):
            res = max_residuals(model, minimal_direct_sum_connection(model), samples=32)
            assert res["nonmetricity"] <= 1e-9 and res["l_compat"] <= 1e-9

    def test_symmetric_part_is_forced(self, dsum):
        # metric compatibility in the sigma direction fixes g0 Gamma(sigma, .) up to a g0-antisymmetric part
        mins = minimal_direct_sum_connection(dsum)
        other = make_carrollian(dsum, random_connection(dsum, 3))
        m = 2
        for x in dsum.chart.halton(10, 0):
            g0 = dsum.values(x)[3][:m, :m]
            A = g0 @ mins.values(dsum, x)[:m, m, :m]
            B = g0 @ other.values(dsum, x)[:m, m, :m]
            np.testing.assert_allclose(A + A.T, B + B.T, atol=1e-10)

    def test_rejects_non_direct_sum(self, flat):
        from carrollian.algebroid import ModelError

        with pytest.raises(ModelError):
            minimal_direct_sum_connection(flat)

    def test_unknown_method(self, flat):
        with pytest.raises(ValueError, match="unknown method"):
            connect(flat, "nope")
