"""The numba kernels and the numpy fallback must agree.

The backend is fixed at import time, so each one runs in a child interpreter.
"""

import json
import os
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from carrollian import _pyflow, _tape, presets
from carrollian.distribution import LeafParams

PROBE = textwrap.dedent(
    """
    import json
    import numpy as np
    from carrollian import backend_name, presets
    from carrollian.distribution import classify_leaf, leaf_census
    from carrollian.dynamics import integrate_apath

    m = presets.random_model(4, 3, seed=2)
    X = m.chart.halton(200, 1)
    batch = m.program.values_batch(X)
    jets = [np.concatenate([p.reshape(-1) for p in m.program.jets(x, 3)]) for x in X[:20]]
    rot = presets.rotation()
    census = leaf_census(presets.vector_field_line(), (9, 9)).counts
    rec = classify_leaf(rot, (1.0, 0.0))
    traj = integrate_apath(presets.vector_field_line(), None, (0.0, 1.0), [1.0], t_end=1.0, dt=0.05)
    print(json.dumps({
        "backend": backend_name(),
        "batch": batch.tolist(),
        "jets": np.array(jets).tolist(),
        "census": census,
        "period": rec.period,
        "poly": rec.polyline[::50].tolist(),
        "gamma": traj.gamma[-1].tolist(),
    }))
    """
)


def probe(flag):
    env = dict(os.environ, CARROLLIAN_NUMBA=flag)
    proc = subprocess.run([sys.executable, "-c", PROBE], env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def both():
    return probe("1"), probe("0")


class TestBackends:
    def test_flag_selects_backend(self, both):
        fast, slow = both
        assert slow["backend"] == "numpy"
        assert fast["backend"] in ("numba", "numpy")

    def test_values_agree(self, both):
        fast, slow = both
        np.testing.assert_allclose(fast["batch"], slow["batch"], rtol=1e-14, atol=1e-15)

    def test_jets_agree(self, both):
        fast, slow = both
        np.testing.assert_allclose(fast["jets"], slow["jets"], rtol=1e-12, atol=1e-13)

    def test_leaves_agree(self, both):
        fast, slow = both
        assert fast["census"] == slow["census"]
        assert abs(fast["period"] - slow["period"]) <= 1e-10
        np.testing.assert_allclose(fast["poly"], slow["poly"], atol=1e-10)

    def test_geodesic_agrees(self, both):
        fast, slow = both
        np.testing.assert_allclose(fast["gamma"], slow["gamma"], atol=1e-12)


def run_tracer(tracer, model, seed, sign=1.0):
    p = LeafParams().resolved(model)
    prog = model.carroll_program
    return tracer(
        prog.ops, prog.args, prog.consts, prog.nout, model.n, model.rank,
        np.asarray(seed, dtype=float), sign, model.chart.lo_array, model.chart.hi_array,
        p.eps, p.return_tol, p.max_arclength, p.dt, p.tol, p.max_steps, p.cap,
    )


class TestPlainTracer:
    @pytest.mark.parametrize(
        "name, seed",
        [("rotation", (1.0, 0.0)), ("action-gl2", (0.3, 0.7)), ("direct-sum", (0.2, 0.3)), ("vector-field-line", (0.0, 0.0))],
    )
    @pytest.mark.parametrize("sign", [1.0, -1.0])
    def test_matches_kernel(self, name, seed, sign):
        model = presets.make_preset(name)
        a = run_tracer(_tape.trace_flow, model, seed, sign)
        b = run_tracer(_pyflow.trace_flow, model, seed, sign)
        assert a[0] == b[0] and a[5] == b[5]
        assert abs(a[1] - b[1]) <= 1e-12 and abs(a[2] - b[2]) <= 1e-12 and abs(a[3] - b[3]) <= 1e-12
        np.testing.assert_allclose(a[4][: a[5]], b[4], atol=1e-12)

    def test_domain_error_is_reported(self):
        model = presets.vector_field_line(X=("log(x)", "0"))
        a = run_tracer(_tape.trace_flow, model, (0.5, 0.0), 1.0)
        b = run_tracer(_pyflow.trace_flow, model, (0.5, 0.0), 1.0)
        assert a[0] == b[0] == _tape.EV_ERROR
        assert a[6] == b[6] == _tape.ERR_LOG and a[7] == b[7]
