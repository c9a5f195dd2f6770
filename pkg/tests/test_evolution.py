import math
from dataclasses import replace

import numpy as np
import pytest

from driftflow import grid as G
from driftflow import models as M
from driftflow import evolution as E
from driftflow.operators import ResolventConfig

TIGHT = ResolventConfig(tol=1e-13)


def cfg(dt, T, **kw):
    kw.setdefault("resolvent", TIGHT)
    return E.EvolutionConfig(dt=dt, horizon=T, **kw)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            E.EvolutionConfig(dt=0.0, horizon=1.0)
        with pytest.raises(ValueError):
            E.EvolutionConfig(dt=1.5, horizon=3.0)
        with pytest.raises(ValueError):
            E.EvolutionConfig(dt=0.3, horizon=1.0)  # not an integer step count
        with pytest.raises(ValueError):
            E.EvolutionConfig(dt=0.1, horizon=0.5, splitting="imex")

    def test_steps(self):
        assert cfg(0.1, 0.5).steps == 5


class TestStep:
    def test_eigenfunction_single_step(self):
        # backward Euler on the sampled eigenfunction divides by 1 + tau lam
        dom = G.BoxDomain(2, (1.0, 1.0), (16, 16))
        data = M.make_model("heat", dom, 0.5)
        tau = 0.01
        lam = G.smallest_eigenvalue_exact(dom)
        u1 = E.step(data.initial, tau, cfg(tau, 0.5), data)
        expect = data.initial.values / (1.0 + tau * lam)
        assert np.max(np.abs(u1.values - expect)) < 1e-13

    def test_zero_stays_zero(self):
        dom = G.BoxDomain(2, (1.0, 1.0), (8, 8))
        data = M.make_model("heat", dom, 0.5)
        u1 = E.step(G.zeros(dom), 0.01, cfg(0.01, 0.5), data)
        assert np.max(np.abs(u1.values)) == 0.0

    def test_splitting_modes_agree_to_second_order_per_step(self):
        # smooth bounded drift; the asymptotic range needs tau below the
        # stiff crossover of the fixed grid
        dom = G.BoxDomain(2, (1.0, 1.0), (16, 16))
        heat = M.make_model("heat", dom, 0.5)

        def bound(coords, t):
            return 1.5 + 0.5 * np.sin(np.pi * coords[0]) * np.cos(np.pi * coords[1])

        def evaluate(coords, t, z):
            b = bound(coords, t)
            return (z * b, np.zeros_like(z * b))

        data = M.ProblemData(
            name="smooth-drift",
            domain=dom,
            diffusion=heat.diffusion,
            drift=M.DriftFlux(evaluate=evaluate, bound=bound),
            source=None,
            initial=heat.initial,
            horizon=0.5,
        )
        diffs = []
        for tau in (1e-3, 5e-4):
            c = cfg(tau, tau * 10)
            a = E.step(data.initial, tau, c, data, level=1.0)
            b = E.step(
                data.initial, tau, replace(c, splitting="semi-implicit"), data, level=1.0
            )
            diffs.append(G.norm_l2(a - b))
        order = math.log2(diffs[0] / diffs[1])
        assert order > 1.8


class TestEvolve:
    def test_heat_eigen_decay_closed_form(self):
        dom = G.BoxDomain(2, (1.0, 1.0), (32, 32))
        data = M.make_model("heat", dom, 0.3)
        tau = 2e-3
        c = cfg(tau, 0.3, resolvent=ResolventConfig(tol=1e-14))
        final, trace = E.evolve(data, c)
        lam = G.smallest_eigenvalue_exact(dom)
        expect = (1.0 + tau * lam) ** (-c.steps) * G.norm_l2(data.initial)
        assert G.norm_l2(final) == pytest.approx(expect, rel=1e-12)
        assert trace.violations == 0

    def test_zero_data_zero_solution(self):
        dom = G.BoxDomain(2, (1.0, 1.0), (8, 8))
        data = M.make_model("heat", dom, 0.1)
        data = M.ProblemData(
            name="heat",
            domain=dom,
            diffusion=data.diffusion,
            drift=None,
            source=None,
            initial=G.zeros(dom),
            horizon=0.1,
        )
        final, _ = E.evolve(data, cfg(0.01, 0.1))
        assert G.norm_l2(final) == 0.0

    def test_manufactured_error_small(self):
        dom = G.BoxDomain(2, (1.0, 1.0), (32, 32))
        data = M.make_model("manufactured", dom, 0.1)
        final, trace = E.evolve(data, cfg(1e-3, 0.1))
        err = G.norm_l2(final - data.exact_grid(0.1))
        assert err < 5e-3
        assert trace.violations == 0

    def test_contraction_without_drift(self):
        dom = G.BoxDomain(2, (1.0, 1.0), (16, 16))
        data = M.make_model("manufactured", dom, 0.1)
        rng = np.random.default_rng(0)
        c = cfg(5e-3, 0.1, store_states=True)
        u0 = data.initial
        v0 = G.GridFunction(dom, u0.values + rng.standard_normal(dom.interior_shape))
        _, tu = E.evolve(data, c, u0=u0)
        _, tv = E.evolve(data, c, u0=v0)
        d0 = G.norm_l2(u0 - v0)
        for a, b in zip(tu.states[1:], tv.states[1:]):
            assert G.norm_l2(a - b) <= d0 * (1 + 1e-12) + 1e-12

    def test_splitting_consistency_global(self):
        dom = G.BoxDomain(2, (1.0, 1.0), (16, 16))
        data = M.make_model("singular-drift", dom, 0.2, c=0.08)
        level = 1.0
        diffs = []
        for tau in (0.01, 0.005):
            c = cfg(tau, 0.2)
            a, _ = E.evolve(data, c, level=level)
            b, _ = E.evolve(data, replace(c, splitting="semi-implicit"), level=level)
            diffs.append(G.norm_l2(a - b))
        assert diffs[1] < 0.7 * diffs[0]  # first order in tau

    def test_trace_bound_constant(self):
        dom = G.BoxDomain(2, (1.0, 1.0), (16, 16))
        data = M.make_model("manufactured", dom, 0.2)
        _, trace = E.evolve(data, cfg(5e-3, 0.2))
        C = trace.measured_bound_constant(data)
        assert 0 < C < 10

    def test_step_failure_attaches_partial_trace(self):
        dom = G.BoxDomain(2, (1.0, 1.0), (10, 10))
        data = M.make_model("lipschitz-nonlinear", dom, 0.1)
        bad = cfg(0.01, 0.1, resolvent=ResolventConfig(tol=1e-14, max_iter=1))
        with pytest.raises(G.ConvergenceError) as info:
            E.evolve(data, bad)
        assert isinstance(info.value.history, E.EvolutionTrace)
        assert "step 1" in str(info.value)

    def test_uncertified_level_warns(self):
        dom = G.BoxDomain(2, (1.0, 1.0), (12, 12))
        data = M.make_model("singular-drift", dom, 0.05, c=0.2)
        plan = M.make_truncation_plan(data, levels=[0.3])
        assert not plan.certified(0)
        c = cfg(0.01, 0.05, truncation=plan, splitting="semi-implicit")
        with pytest.warns(RuntimeWarning):
            E.evolve(data, c)

    def test_trace_csv(self, tmp_path):
        dom = G.BoxDomain(1, (1.0,), (8,))
        data = M.make_model("heat", dom, 0.1)
        _, trace = E.evolve(data, cfg(0.01, 0.1))
        path = tmp_path / "trace.csv"
        trace.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(E.EvolutionTrace.CSV_COLUMNS)
        assert len(lines) == 11


class TestContinuation:
    def test_saturated_plan_levels_agree(self):
        dom = G.BoxDomain(2, (1.0, 1.0), (16, 16))
        data = M.make_model("singular-drift", dom, 0.1, c=0.08)
        bmax = data.drift_bound_grid(0.0).max_abs()
        plan = M.make_truncation_plan(data, levels=[2 * bmax, 4 * bmax])
        res = E.continuation(data, cfg(2e-3, 0.1, truncation=plan))
        assert res.differences[0] <= 1e-10

    def test_singular_drift_saturation(self):
        dom = G.BoxDomain(2, (1.0, 1.0), (16, 16))
        data = M.make_model("singular-drift", dom, 0.1, c=0.08)
        plan = M.make_truncation_plan(data)
        res = E.continuation(data, cfg(2e-3, 0.1, truncation=plan))
        assert res.differences_nonincreasing
        assert res.differences[-1] <= 1e-9
        assert res.warnings  # 2D drift levels carry no embedding certificate

    def test_requires_plan(self):
        dom = G.BoxDomain(2, (1.0, 1.0), (8, 8))
        data = M.make_model("singular-drift", dom, 0.1, c=0.08)
        with pytest.raises(ValueError):
            E.continuation(data, cfg(2e-3, 0.1))


class TestUniqueness:
    def test_identical_states_stay_identical(self):
        dom = G.BoxDomain(2, (1.0, 1.0), (12, 12))
        data = M.make_model("heat", dom, 0.1)
        rep = E.uniqueness_harness(data, cfg(5e-3, 0.05), data.initial, data.initial)
        assert max(rep.distances) <= 1e-12

    def test_pure_contraction_without_drift(self):
        dom = G.BoxDomain(2, (1.0, 1.0), (12, 12))
        data = M.make_model("variable-diffusion", dom, 0.1)
        rng = np.random.default_rng(1)
        u0 = data.initial
        v0 = G.GridFunction(dom, u0.values + 0.5 * rng.standard_normal(dom.interior_shape))
        rep = E.uniqueness_harness(data, cfg(5e-3, 0.05), u0, v0)
        assert rep.growth_constant == 0.0
        assert rep.contraction_monotone
        assert rep.tightest_exponent <= 0.0
        assert rep.bound_satisfied

    def test_drift_growth_envelope(self):
        dom = G.BoxDomain(2, (1.0, 1.0), (16, 16))
        data = M.make_model("singular-drift", dom, 0.1, c=0.08)
        rng = np.random.default_rng(2)
        u0 = data.initial
        v0 = G.GridFunction(dom, u0.values + 0.5 * rng.standard_normal(dom.interior_shape))
        rep = E.uniqueness_harness(data, cfg(2e-3, 0.05), u0, v0, level=1.0)
        assert rep.growth_constant > 0.0
        assert rep.bound_satisfied
        assert rep.tightest_exponent <= rep.growth_constant


class TestWeakResidual:
    def test_zero_test_function(self):
        dom = G.BoxDomain(2, (1.0, 1.0), (8, 8))
        data = M.make_model("heat", dom, 0.1)
        c = cfg(0.01, 0.1, store_states=True)
        _, trace = E.evolve(data, c)
        zero = E.SpaceTimeTest(
            name="zero",
            value=lambda dom_, t: G.zeros(dom_),
            dt=lambda dom_, t: G.zeros(dom_),
        )
        out = E.weak_residual(trace.states, data, 0.01, tests=[zero])
        assert out[0].residual == 0.0

    def test_exact_trace_residual_is_quadrature_error(self):
        dom = G.BoxDomain(2, (1.0, 1.0), (24, 24))
        data = M.make_model("manufactured", dom, 0.1)
        errs = []
        for tau in (4e-3, 2e-3):
            n = round(0.1 / tau)
            states = [data.exact_grid(j * tau) for j in range(n + 1)]
            entries = E.weak_residual(states, data, tau)
            errs.append(max(e.normalized for e in entries))
        assert errs[0] < 0.05
        assert errs[1] < 0.7 * errs[0]

    def test_computed_trace_first_order(self):
        vals = []
        for n, tau in ((12, 4e-3), (24, 2e-3)):
            dom = G.BoxDomain(2, (1.0, 1.0), (n, n))
            data = M.make_model("manufactured", dom, 0.1)
            _, trace = E.evolve(data, cfg(tau, 0.1, store_states=True))
            entries = E.weak_residual(trace.states, data, tau)
            vals.append(max(e.normalized for e in entries))
        assert vals[1] < 0.65 * vals[0]
