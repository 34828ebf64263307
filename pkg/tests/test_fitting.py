import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multipower.fitting import (
    FitConfig,
    FitDivergence,
    _Problem,
    evaluate_metrics,
    fit_law,
    fit_objective,
    fit_two_stage_reduction,
    huber,
    huber_grad,
)
from multipower.laws import LawVariant, LossCurve, MplParams, predict
from multipower.schedules import make_schedule, validation_grid

P = MplParams(L0=2.5, A=0.6, B=400.0, C=0.5, alpha=0.45, beta=0.6, gamma=0.5)


def test_huber_values():
    assert huber(0.0, 0.3) == 0.0
    assert huber(0.5, 1.0) == pytest.approx(0.125)
    assert huber(2.0, 1.0) == pytest.approx(1.5)
    assert huber(-2.0, 1.0) == pytest.approx(1.5)


def test_huber_is_c1_at_threshold():
    d = 0.01
    for r in (d, -d):
        lo, hi = r - 1e-9, r + 1e-9
        assert huber(hi, d) == pytest.approx(huber(lo, d), abs=1e-10)
        assert huber_grad(hi, d) == pytest.approx(huber_grad(lo, d), abs=1e-8)
    # derivative from differences equals the gradient
    for r in (0.003, 0.02, -0.05):
        fd = (huber(r + 1e-7, d) - huber(r - 1e-7, d)) / 2e-7
        assert fd == pytest.approx(float(huber_grad(r, d)), rel=1e-6)


def _dataset(params=P, tag="MPL", every=100):
    scheds = [
        make_schedule("constant", 200, 3000, 1e-3),
        make_schedule("cosine", 200, 3000, 1e-3),
        make_schedule("two_stage", 200, 2000, 1e-3, lr_b=3e-4, T_A=1000),
    ]
    out = []
    for s in scheds:
        steps = validation_grid(s.total_steps, every)
        out.append((s, LossCurve(steps, predict(tag, params, s, steps))))
    return out


def test_objective_perfect_fit_is_zero_and_additive():
    ds = _dataset()
    assert fit_objective("MPL", P, ds) == 0.0
    q = P.with_(A=0.7)
    total = fit_objective("MPL", q, ds)
    parts = sum(fit_objective("MPL", q, [d]) for d in ds)
    assert total == pytest.approx(parts, rel=1e-14)
    assert fit_objective("MPL", q, ds[::-1]) == pytest.approx(total, rel=1e-14)


def test_objective_single_point_log_residual_one():
    s = make_schedule("constant", 0, 10, 1e-3)
    pred = predict("MPL", P, s, [10])[0]
    ds = [(s, LossCurve([10], [pred / math.e]))]
    assert fit_objective("MPL", P, ds, delta=1.0) == pytest.approx(0.5, rel=1e-12)


def test_objective_rejects_nonpositive_prediction():
    s = make_schedule("cosine", 0, 100, 1e-3)
    ds = [(s, LossCurve([50, 100], [1.0, 1.0]))]
    with pytest.raises(ValueError):
        fit_objective("LLDL", P.with_(L0=0.0, A=0.0, B=1e6), ds)


def test_metrics_examples_and_identities():
    m = evaluate_metrics([1, 2, 4], [1, 2, 3])
    assert m.mae == pytest.approx(1 / 3)
    assert m.rmse == pytest.approx(1 / math.sqrt(3))
    assert m.r2 == pytest.approx(0.5)
    assert m.prede == pytest.approx(1 / 9)
    assert m.worste == pytest.approx(1 / 3)
    perfect = evaluate_metrics([1.0, 2.0], [1.0, 2.0])
    assert perfect.r2 == 1.0 and perfect.mae == perfect.rmse == perfect.prede == perfect.worste == 0.0
    assert math.isnan(evaluate_metrics([1.0, 1.1], [1.0, 1.0]).r2)
    with pytest.raises(ValueError):
        evaluate_metrics([1.0], [0.0])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32), n=st.integers(2, 50))
def test_metrics_ordering_properties(seed, n):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(1, 5, n)
    pred = gt + rng.normal(0, 0.1, n)
    m = evaluate_metrics(pred, gt)
    assert m.mae <= m.rmse * (1 + 1e-12)
    assert m.prede <= m.worste * (1 + 1e-12)
    assert m.r2 <= 1


@settings(max_examples=100, deadline=None)
@given(z=st.lists(st.floats(-40, 40), min_size=7, max_size=7))
def test_reparameterization_stays_feasible(z):
    problem = _Problem(LawVariant("MPL"), [], [], 0.01)
    p = problem.from_z(np.array(z), P)
    assert 0 < p.alpha < 1 and 0 < p.beta < 1 and 0 < p.gamma < 1
    assert p.A >= 0 and p.B >= 0 and p.C >= 0 and p.L0 >= 0


def test_mpl_self_recovery_small():
    ds = _dataset()
    rep = fit_law("MPL", ds, FitConfig(steps_per_phase=1500, phases=2, anneal_to=0.05))
    assert rep.objective < 1e-4
    assert rep.pooled.r2 > 0.999
    held = make_schedule("wsdld", 200, 3000, 1e-3, decay_steps=600)
    steps = validation_grid(3000, 100)
    m = evaluate_metrics(predict("MPL", rep.params, held, steps), predict("MPL", P, held, steps))
    assert m.r2 > 0.999
    # best-so-far trace never increases
    vals = [f for _, f in rep.trace]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_fit_is_deterministic():
    ds = _dataset(every=300)
    cfg = FitConfig(steps_per_phase=200, phases=1)
    a = fit_law("MPL", ds, cfg)
    b = fit_law("MPL", ds, cfg)
    assert a.params == b.params and a.objective == b.objective


def test_cdsl_recovers_exponent():
    truth = MplParams(L0=2.3, A=4.0, B=0.0, C=1.0, alpha=0.35, beta=0.5, gamma=0.0)
    ds = []
    for T in (1000, 2000, 4000, 8000, 16000, 32000):
        s = make_schedule("cosine", 0, T, 1e-3)
        ds.append((s, LossCurve([T], predict("CDSL", truth, s, [T]))))
    rep = fit_law("CDSL", ds, FitConfig(steps_per_phase=4000, phases=3, anneal_to=0.01, delta=1e-3))
    assert rep.params.alpha == pytest.approx(0.35, rel=0.01)


def test_mtl_grid_selects_generating_momentum():
    truth = MplParams(L0=2.5, A=0.6, B=2.0, C=1.0, alpha=0.45, beta=0.5, gamma=0.0)
    ds = _dataset(truth, LawVariant("MTL", 0.99), every=50)
    rep = fit_law("MTL", ds, FitConfig(steps_per_phase=600, phases=2, n_starts=3, anneal_to=0.05))
    assert rep.variant.lam == 0.99
    assert set(rep.lambda_objectives) == {0.95, 0.99, 0.995, 0.999, 0.9995}


def test_fit_errors():
    with pytest.raises(ValueError):
        fit_law("MPL", [])
    with pytest.raises(ValueError):
        FitConfig(phases=0)
    with pytest.raises(ValueError):
        FitConfig(init_mode="explicit")
    bad = MplParams(L0=0.0, A=0.0, B=1e9, C=1.0, alpha=0.5, beta=0.5, gamma=0.0)
    with pytest.raises(FitDivergence):
        fit_law("LLDL", [(make_schedule("cosine", 0, 10, 1e-3), LossCurve([10], [1.0]))],
                FitConfig(init_mode="explicit", init=bad, steps_per_phase=5, phases=1))


def test_two_stage_reduction_recovery():
    x = np.arange(1, 3001, dtype=float)
    ld = 0.1 * (1 - (0.2 * x + 1) ** -0.4)
    B, C, beta = fit_two_stage_reduction(x, ld, steps=20000, lr=2e-2)
    assert B == pytest.approx(0.1, rel=0.01)
    assert C == pytest.approx(0.2, rel=0.01)
    assert beta == pytest.approx(0.4, rel=0.01)
    Bf, Cf, bf = fit_two_stage_reduction(x, ld, beta_fixed=0.4, steps=20000, lr=2e-2)
    assert bf == pytest.approx(0.4, rel=1e-9)
    assert Bf == pytest.approx(0.1, rel=0.01)


def test_two_stage_reduction_saturated_and_zero():
    x = np.arange(1, 500, dtype=float)
    B, C, beta = fit_two_stage_reduction(x, np.full(x.shape, 0.05), beta_fixed=0.4)
    assert B == pytest.approx(0.05, rel=0.01)
    with pytest.raises(ValueError):
        fit_two_stage_reduction(x, np.zeros_like(x))


def test_fit_report_serialization(tmp_path):
    import json

    ds = _dataset(every=300)
    rep = fit_law("OPL", ds, FitConfig(steps_per_phase=50, phases=1))
    rep.save(tmp_path / "r.json", tmp_path / "trace.csv")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["variant"]["tag"] == "OPL" and len(d["metrics"]) == 3
    assert (tmp_path / "trace.csv").read_text().startswith("iteration,objective")
