import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carrollian import presets
from carrollian.algebroid import ModelError, PreconditionError
from carrollian.connection import ExprConnection, make_carrollian, make_frame_parallel_carrollian
from carrollian.distribution import IntegrationError
from carrollian.dynamics import (
    PARTICLE,
    SWIFTON,
    ForceSection,
    classify_initial,
    integrate_apath,
    leaf_crossings,
    particle_confinement,
)


@pytest.fixture(scope="module")
def wide_line():
    return presets.vector_field_line(lo=-10.0, hi=10.0)


@pytest.fixture(scope="module")
def growth():
    # x' = x alpha with alpha constant: x(t) = x0 exp(alpha0 t)
    return presets.vector_field_line(X=("x", "0"))


@pytest.fixture(scope="module")
def dsum_fp(dsum):
    return make_frame_parallel_carrollian(dsum)


class TestClosedForms:
    def test_line_geodesic(self, line):
        traj = integrate_apath(line, None, (0.0, 1.0), [1.0], t_end=2.0, dt=0.01)
        np.testing.assert_allclose(traj.gamma[-1], [2.0, 1.0], atol=1e-6)
        assert traj.final_event == "Completed" and traj.t[-1] == pytest.approx(2.0)

    def test_singular_start_freezes(self, line):
        traj = integrate_apath(line, None, (0.0, 0.0), [1.0], t_end=2.0, dt=0.01)
        assert traj.frozen and traj.final_event == "Frozen"
        g, a = traj.state_at(2.0)
        assert np.max(np.abs(g)) <= 1e-9
        assert a == pytest.approx([1.0])

    def test_flat_null_line(self, flat):
        start = (0.3, -0.4, -1.0)
        traj = integrate_apath(flat, None, start, [0.0, 0.0, 1.0], t_end=1.5, dt=0.05)
        for s in (0.0, 0.5, 1.5):
            g, _ = traj.state_at(s)
            np.testing.assert_allclose(g, [0.3, -0.4, -1.0 + s], atol=1e-9)

    def test_exponential_growth(self, growth):
        traj = integrate_apath(growth, None, (0.5, 0.0), [0.8], t_end=1.0, dt=0.05)
        assert traj.gamma[-1, 0] == pytest.approx(0.5 * np.exp(0.8), abs=1e-8)

    def test_constant_christoffel(self, line):
        # alpha' = -c alpha^2 gives alpha = alpha0 / (1 + c alpha0 t)
        G = ExprConnection.build(line, {(0, 0, 0): "0.5"})
        traj = integrate_apath(line, G, (0.0, 1.0), [1.0], t_end=1.5, dt=0.01)
        assert traj.alpha[-1, 0] == pytest.approx(1.0 / 1.75, abs=1e-9)
        # x' = y alpha, y = 1: x = 2 log(1 + t / 2)
        assert traj.gamma[-1, 0] == pytest.approx(2.0 * np.log(1.75), abs=1e-8)

    def test_chart_exit_keeps_last_inside_sample(self, line):
        traj = integrate_apath(line, None, (0.0, 1.0), [1.0], t_end=5.0, dt=0.01)
        assert traj.final_event == "ExitedChart"
        assert line.chart.contains(traj.gamma[-1])
        assert traj.gamma[-1, 0] <= 2.0
        assert np.all(np.diff(traj.t) > 0)

    def test_state_beyond_end_rejected_unless_frozen(self, line):
        traj = integrate_apath(line, None, (0.0, 1.0), [1.0], t_end=0.5, dt=0.1)
        with pytest.raises(ValueError):
            traj.state_at(1.0)


class TestIntegrator:
    def test_rk4_order(self, growth):
        exact = 0.5 * np.exp(1.0)
        errs = []
        for dt in (0.2, 0.1, 0.05):
            traj = integrate_apath(growth, None, (0.5, 0.0), [1.0], t_end=1.0, dt=dt, refine=False)
            errs.append(abs(traj.gamma[-1, 0] - exact))
        assert errs[0] / errs[1] >= 8.0 and errs[1] / errs[2] >= 8.0

    def test_refinement_records_metadata(self, growth):
        traj = integrate_apath(growth, None, (0.5, 0.0), [2.0], t_end=1.0, dt=0.2)
        assert traj.meta["halvings"] >= 1
        assert traj.meta["refinement_change"] <= 1e-8
        assert traj.meta["dt"] == pytest.approx(0.2 / 2 ** traj.meta["halvings"])

    def test_time_reversal(self, dsum):
        conn = make_carrollian(dsum)
        fwd = integrate_apath(dsum, conn, (0.2, 0.5), [0.3, 0.2, 1.0], t_end=1.0, dt=0.02)
        back = integrate_apath(dsum, conn, fwd.gamma[-1], -fwd.alpha[-1], t_end=1.0, dt=0.02)
        np.testing.assert_allclose(back.gamma[-1], [0.2, 0.5], atol=1e-6)
        np.testing.assert_allclose(-back.alpha[-1], [0.3, 0.2, 1.0], atol=1e-6)

    def test_zero_force_matches_geodesic(self, dsum):
        conn = make_carrollian(dsum)
        F = ForceSection.build(dsum, ["0", "0", "0"])
        a = integrate_apath(dsum, conn, (0.1, 0.4), [0.1, 0.0, 1.0], t_end=0.5, dt=0.05)
        b = integrate_apath(dsum, conn, (0.1, 0.4), [0.1, 0.0, 1.0], force=F, t_end=0.5, dt=0.05)
        assert np.max(np.abs(a.gamma - b.gamma)) <= 1e-12
        assert np.max(np.abs(a.alpha - b.alpha)) <= 1e-12
        assert b.meta["force"] == "force"

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_state(self, line):
        G = ExprConnection.build(line, {(0, 0, 0): "-1e200"})
        with pytest.raises(IntegrationError):
            integrate_apath(line, G, (0.0, 0.1), [1e200], t_end=1.0, dt=0.1, refine=False)

    @pytest.mark.parametrize("kw", [{"dt": 0.0}, {"t_end": -1.0}])
    def test_bad_steps(self, line, kw):
        with pytest.raises(ValueError):
            integrate_apath(line, None, (0.0, 1.0), [1.0], **kw)

    def test_wrong_alpha_length(self, line):
        with pytest.raises(ValueError):
            integrate_apath(line, None, (0.0, 1.0), [1.0, 2.0])

    @settings(max_examples=15)
    @given(st.floats(-1.5, 1.5), st.floats(0.2, 1.5), st.floats(-1.0, 1.0).filter(lambda a: abs(a) > 0.1))
    def test_line_geodesics_are_linear(self, x0, y0, a0):
        line = presets.vector_field_line()
        traj = integrate_apath(line, None, (x0, y0), [a0], t_end=0.25, dt=0.05)
        np.testing.assert_allclose(traj.gamma[-1], [x0 + y0 * a0 * 0.25, y0], atol=1e-9)


class TestClassification:
    def test_sigma_is_particle(self, flat):
        assert classify_initial(flat, [0.0, 0.0, 1.0], (0.0, 0.0, 0.0)) == PARTICLE

    def test_scaled_sigma_is_particle(self, dsum):
        s = dsum.values((0.3, 0.2))[1]
        assert classify_initial(dsum, 2.5 * s, (0.3, 0.2)) == PARTICLE
        assert classify_initial(dsum, -s, (0.3, 0.2)) == PARTICLE

    def test_transverse_is_swifton(self, flat):
        assert classify_initial(flat, [1.0, 0.0, 1.0], (0.0, 0.0, 0.0)) == SWIFTON

    def test_zero_alpha(self, flat):
        with pytest.raises(ValueError):
            classify_initial(flat, [0.0, 0.0, 0.0], (0.0, 0.0, 0.0))

    @given(st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3), st.floats(-1.9, 1.9), st.floats(-1.9, 1.9))
    def test_ray_invariance(self, c, x, y):
        dsum = presets.direct_sum()
        s = dsum.values((x, y))[1]
        assert classify_initial(dsum, c * s, (x, y)) == PARTICLE
        assert classify_initial(dsum, c * (s + np.array([1.0, 0.0, 0.0])), (x, y)) == SWIFTON


class TestConfinement:
    def test_line_particle(self, wide_line):
        traj = integrate_apath(wide_line, None, (0.0, 1.0), [1.0], t_end=5.0, dt=0.05)
        rep = particle_confinement(wide_line, make_carrollian(wide_line), traj)
        assert rep.misalignment <= 1e-6 and rep.leaf_drift <= 1e-6
        assert rep.confined and rep.to_dict()["confined"] is True

    def test_direct_sum_particle(self, dsum, dsum_fp):
        traj = integrate_apath(dsum, dsum_fp, (0.0, 1.0), [0.0, 0.0, 1.0], t_end=1.0, dt=0.05)
        rep = particle_confinement(dsum, dsum_fp, traj)
        assert rep.misalignment <= 1e-6
        assert np.max(np.abs(traj.gamma[:, 1] - 1.0)) <= 1e-6
        assert rep.leaf_drift <= 1e-6

    def test_swifton_rejected(self, dsum, dsum_fp):
        traj = integrate_apath(dsum, dsum_fp, (0.0, 1.0), [0.0, 1.0, 1.0], t_end=0.2, dt=0.05)
        with pytest.raises(PreconditionError) as info:
            particle_confinement(dsum, dsum_fp, traj)
        assert info.value.hypothesis == "Particle"

    def test_non_l_compatible_rejected(self, flat):
        G = ExprConnection.build(flat, {(0, 0, 2): "1"})
        traj = integrate_apath(flat, G, (0.0, 0.0, 0.0), [0.0, 0.0, 1.0], t_end=0.2, dt=0.05)
        with pytest.raises(PreconditionError) as info:
            particle_confinement(flat, G, traj)
        assert info.value.hypothesis == "L-compatible"

    def test_swifton_crosses_leaves(self, dsum):
        conn = make_carrollian(dsum)
        traj = integrate_apath(dsum, conn, (0.0, 1.0), [0.0, 1.0, 1.0], t_end=1.0, dt=0.02)
        count, dist = leaf_crossings(dsum, traj)
        assert count >= 1 and dist >= 0.1
        assert np.ptp(traj.gamma[:, 1]) >= 0.1


class TestForces:
    def test_particle_force_must_be_vertical(self, dsum):
        with pytest.raises(ModelError, match="transverse"):
            ForceSection.build(dsum, ["1", "0", "0"], mode="particle")

    def test_force_length(self, dsum):
        with pytest.raises(ModelError):
            ForceSection.build(dsum, ["0", "0"])

    def test_unknown_mode(self, dsum):
        with pytest.raises(ValueError):
            ForceSection.build(dsum, ["0", "0", "0"], mode="weird")

    def test_particle_force_keeps_particle(self, dsum, dsum_fp):
        F = ForceSection.build(dsum, ["0", "0", "0.5*x + 0.2"], mode="particle")
        traj = integrate_apath(dsum, dsum_fp, (0.0, 1.0), [0.0, 0.0, 1.0], force=F, t_end=1.0, dt=0.05)
        assert np.max(traj.misalignment(dsum)) <= 1e-6
        assert np.max(np.abs(traj.gamma[:, 1] - 1.0)) <= 1e-6

    def test_general_force_on_line(self, line):
        # alpha' = 1: alpha = 1 + t, x' = y alpha with y = 1: x = t + t^2 / 2
        F = ForceSection.build(line, ["1"])
        traj = integrate_apath(line, None, (0.0, 1.0), [1.0], force=F, t_end=1.0, dt=0.05)
        assert traj.gamma[-1, 0] == pytest.approx(1.5, abs=1e-9)
        assert traj.alpha[-1, 0] == pytest.approx(2.0, abs=1e-9)
