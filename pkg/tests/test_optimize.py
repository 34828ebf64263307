import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multipower.laws import LawVariant, MplParams, predict
from multipower.optimize import (
    OptConfig,
    detect_phases,
    final_loss_and_grad,
    optimize_schedule,
    predicted_final_loss,
    project_reductions,
)
from multipower.presets import REFERENCE_400M
from multipower.schedules import Schedule, make_schedule
from oracles import random_monotone_lrs

P = REFERENCE_400M


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32), T=st.integers(1, 300), scale=st.floats(0.01, 100))
def test_projection_is_feasible(seed, T, scale):
    rng = np.random.default_rng(seed)
    eta0 = 3e-4
    raw = rng.normal(0, scale * eta0 / T, T)
    d, eta = project_reductions(raw, eta0, 1e-10)
    assert np.all(d >= 0) and d.sum() <= eta0 * (1 + 1e-12)
    assert np.all(eta >= 0) and np.all(eta <= eta0)
    assert np.all(np.diff(np.concatenate(([eta0], eta))) <= 0)
    assert np.all((eta == 0) | (eta > 1e-10))
    assert np.allclose(eta0 - np.cumsum(d), eta, atol=1e-18)


def test_projection_leaves_feasible_points_alone():
    eta0 = 1.0
    d = np.array([0.1, 0.0, 0.3, 0.2])
    out, eta = project_reductions(d, eta0, 1e-10)
    assert np.allclose(out, d, atol=1e-16)
    # budget overflow: projection onto sum = eta0 subtracts a common shift
    out, eta = project_reductions(np.array([0.9, 0.5, 0.1]), eta0, 1e-10)
    assert out.sum() == pytest.approx(1.0)
    assert out == pytest.approx([0.7, 0.3, 0.0])


@pytest.mark.parametrize("variant", [LawVariant("MPL"), LawVariant("NoGamma"), LawVariant("OPL"),
                                     LawVariant("MTL", 0.995)])
def test_final_loss_gradient_matches_differences(variant):
    rng = np.random.default_rng(5)
    T, eta0 = 300, 3e-4
    eta = np.maximum(random_monotone_lrs(rng, T, eta0), 1e-6)
    sw = 0.5 * eta0 * 100
    f, g = final_loss_and_grad(variant, P, eta, eta0, sw)
    s = Schedule(100, eta0, eta)
    assert f == pytest.approx(predict(variant, P, s, [T])[0], rel=1e-13)
    d = -np.diff(eta, prepend=eta0)
    for j in rng.choice(T, 12, replace=False):
        h = 1e-10
        dp, dm = d.copy(), d.copy()
        dp[j] += h
        dm[j] -= h
        fp, _ = final_loss_and_grad(variant, P, eta0 - np.cumsum(dp), eta0, sw)
        fm, _ = final_loss_and_grad(variant, P, eta0 - np.cumsum(dm), eta0, sw)
        fd = (fp - fm) / (2 * h)
        assert g[j] == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_predicted_final_loss_constant_opl():
    s = make_schedule("constant", 2160, 5000, 3e-4)
    expect = P.L0 + P.A * (5000 * 3e-4 + 0.5 * 3e-4 * 2160) ** -P.alpha
    assert predicted_final_loss("OPL", P, s) == pytest.approx(expect, rel=1e-14)
    shorter = make_schedule("constant", 2160, 4000, 3e-4)
    assert predicted_final_loss("OPL", P, shorter) > predicted_final_loss("OPL", P, s)


def test_small_mpl_optimization_beats_baselines():
    cfg = OptConfig(T=2000, eta0=3e-4, warmup_steps=200, iters=1500, polish_steps=100)
    res = optimize_schedule("MPL", P, cfg)
    s = res.schedule
    assert s.is_monotone and s.post_lrs.max() <= 3e-4 and s.post_lrs.min() >= 0
    const = predicted_final_loss("MPL", P, make_schedule("constant", 200, 2000, 3e-4))
    cos = predicted_final_loss("MPL", P, make_schedule("cosine", 200, 2000, 3e-4))
    assert res.final_loss <= const and res.final_loss <= cos
    assert res.final_loss == pytest.approx(predicted_final_loss("MPL", P, s), rel=1e-12)
    assert all(b <= a for a, b in zip(res.best_trace, res.best_trace[1:]))
    assert set(res.losses_by_step_size) == set(cfg.step_sizes)


def test_small_mtl_collapses():
    p = MplParams(2.5, 0.65, 0.57, 1.0, 0.43, 0.5, 0.0)
    cfg = OptConfig(T=3000, eta0=3e-4, warmup_steps=200, iters=2000)
    s = optimize_schedule(LawVariant("MTL", 0.99), p, cfg).schedule
    inside = (s.post_lrs > cfg.eps_clamp) & (s.post_lrs < cfg.eta0 - 1e-8)
    assert inside.sum() <= 2


def test_detect_phases_wsdsc_and_linear():
    sc = make_schedule("wsdsc", 0, 24000, 3e-4, decay_steps=6000)
    rep = detect_phases(sc)
    assert rep.decay_exponent == pytest.approx(1.5, abs=1e-3)
    assert rep.T_stable >= 18000 and rep.has_decay
    ld = make_schedule("wsdld", 0, 24000, 3e-4, decay_steps=5000, end_lr=3e-5)
    assert detect_phases(ld).decay_exponent == pytest.approx(1.0, abs=1e-3)
    assert detect_phases(ld).final_lr_ratio == pytest.approx(0.1)


def test_detect_phases_constant_and_errors():
    rep = detect_phases(make_schedule("constant", 0, 100, 1.0))
    assert rep.T_stable == 100 and not rep.has_decay
    assert rep.to_dict()["decay_exponent"] is None
    with pytest.raises(ValueError):
        detect_phases(make_schedule("cyclic", 0, 100, 1.0, lr_lo=0.1, half_cycle=10))


def test_opt_config_validation():
    with pytest.raises(ValueError):
        OptConfig(T=1)
    with pytest.raises(ValueError):
        OptConfig(eps_clamp=0.0)
    with pytest.raises(ValueError):
        OptConfig(moment="sign")
    with pytest.raises(ValueError):
        optimize_schedule("SPL", P, OptConfig(T=10, iters=1))
    assert math.isfinite(OptConfig().eta0)
