"""Fitting loss-curve laws with a Huber objective on log losses, plus metrics."""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .laws import (
    MTL_LAMBDA_GRID,
    PARAM_NAMES,
    CurveView,
    LawVariant,
    LossCurve,
    MplParams,
    predict_view,
)
from .schedules import Schedule

__all__ = [
    "FitConfig",
    "Metrics",
    "FitReport",
    "FitDivergence",
    "huber",
    "huber_grad",
    "fit_objective",
    "fit_law",
    "fit_two_stage_reduction",
    "evaluate_metrics",
]

log = logging.getLogger(__name__)

C_GRID = (1e-2, 1e-1, 1.0, 10.0)
EXP_GRID = (0.2, 0.4, 0.6, 0.8)
INDEX_PARAMS = ("alpha", "beta", "gamma")
BASELINE_TAGS = ("MTL", "CDSL")


class FitDivergence(RuntimeError):
    """Raised when the objective becomes non-finite during optimization."""


@dataclass
class FitConfig:
    delta: float = 1e-2
    lr_index: float = 5e-3
    lr_coeff: float = 5e-2
    steps_per_phase: int = 50_000
    phases: int = 2
    # each later phase runs at lr * phase_decay ** phase
    phase_decay: float = 0.1
    # cosine annealing inside each phase down to this fraction of its lr
    anneal_to: float = 1.0
    seed: int = 0
    init_mode: str = "grid"
    init: MplParams | None = None
    n_starts: int = 8
    screen_frac: float = 0.1
    exact_views: bool = False
    trace_every: int = 100

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.lr_index <= 0 or self.lr_coeff <= 0:
            raise ValueError("step sizes must be positive")
        if self.phases < 1 or self.steps_per_phase < 1:
            raise ValueError("need at least one phase and one step")
        if self.init_mode not in ("default", "grid", "explicit"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        if self.init_mode == "explicit" and self.init is None:
            raise ValueError("init_mode='explicit' needs init params")
        if not 0 < self.anneal_to <= 1:
            raise ValueError("anneal_to must lie in (0, 1]")


@dataclass(frozen=True)
class Metrics:
    r2: float
    mae: float
    rmse: float
    prede: float
    worste: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitReport:
    variant: LawVariant
    params: MplParams
    objective: float
    trace: list[tuple[int, float]] = field(default_factory=list)
    metrics: list[Metrics] = field(default_factory=list)
    pooled: Metrics | None = None
    lambda_objectives: dict[float, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.to_dict(),
            "params": self.params.to_dict(),
            "objective": self.objective,
            "metrics": [m.to_dict() for m in self.metrics],
            "pooled": self.pooled.to_dict() if self.pooled else None,
            "lambda_objectives": {str(k): v for k, v in self.lambda_objectives.items()},
        }

    def save(self, path, trace_path=None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))
        if trace_path is not None:
            np.savetxt(trace_path, np.array(self.trace).reshape(-1, 2), fmt=["%d", "%.17g"],
                       delimiter=",", header="iteration,objective", comments="")


def huber(r, delta: float):
    r = np.asarray(r, dtype=np.float64)
    a = np.abs(r)
    out = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def huber_grad(r, delta: float):
    return np.clip(r, -delta, delta)


def _log_residual(pred, gt):
    if np.any(pred <= 0) or not np.all(np.isfinite(pred)):
        raise ValueError("prediction is non-positive or non-finite; log residual undefined")
    return np.log(pred) - np.log(gt)


def fit_objective(variant, p: MplParams, dataset, delta: float = 1e-2, exact: bool = True) -> float:
    """Sum of Huber losses of log residuals over every curve point."""
    if isinstance(variant, str):
        variant = LawVariant(variant)
    total = 0.0
    for s, c in dataset:
        if np.any(c.losses <= 0):
            raise ValueError("ground-truth losses must be positive")
        v = CurveView.exact_view(s, c.steps) if exact else CurveView.coarse_view(s, c.steps)
        total += float(huber(_log_residual(predict_view(variant, p, v), c.losses), delta).sum())
    return total


class _Problem:
    """Objective and gradient over the free parameters of one variant."""

    def __init__(self, variant: LawVariant, views, targets, delta):
        self.variant = variant
        self.views = views
        self.targets = targets
        self.delta = delta
        self.free = [PARAM_NAMES.index(n) for n in variant.free_params]
        self.is_index = np.array([PARAM_NAMES[i] in INDEX_PARAMS for i in self.free])

    def value(self, p: MplParams, grad: bool = False):
        total = 0.0
        g = np.zeros(7)
        for v, y in zip(self.views, self.targets):
            if grad:
                pred, jac = predict_view(self.variant, p, v, grad=True)
            else:
                pred = predict_view(self.variant, p, v)
            if np.any(pred <= 0) or not np.all(np.isfinite(pred)):
                return (math.inf, g) if grad else math.inf
            r = np.log(pred) - np.log(y)
            total += float(huber(r, self.delta).sum())
            if grad:
                g += (huber_grad(r, self.delta) / pred) @ jac
        return (total, g) if grad else total

    # unconstrained coordinates: log for coefficients, logit for exponents
    def to_z(self, p: MplParams) -> np.ndarray:
        x = p.as_array()[self.free]
        z = np.empty_like(x)
        e = np.clip(x[self.is_index], 1e-9, 1 - 1e-9)
        z[self.is_index] = np.log(e) - np.log1p(-e)
        z[~self.is_index] = np.log(np.maximum(x[~self.is_index], 1e-300))
        return z

    def from_z(self, z, base: MplParams) -> MplParams:
        x = base.as_array()
        with np.errstate(over="ignore"):
            vals = np.where(self.is_index, 1 / (1 + np.exp(-z)), np.exp(z))
        # keep exponents strictly inside (0, 1) in floating point
        vals = np.where(self.is_index, np.clip(vals, 1e-12, 1 - 1e-12), vals)
        x[self.free] = vals
        return MplParams.from_array(x)

    def dz(self, p: MplParams) -> np.ndarray:
        x = p.as_array()[self.free]
        return np.where(self.is_index, x * (1 - x), x)


def _adam(problem: _Problem, start: MplParams, cfg: FitConfig, steps: int, trace: list, offset: int = 0):
    """Multi-phase Adam with best-iterate tracking; returns (best params, best objective)."""
    best_p = start
    best_f = problem.value(start)
    if not math.isfinite(best_f):
        raise FitDivergence(f"objective is not finite at the initial point {start}")
    base_lr = np.where(problem.is_index, cfg.lr_index, cfg.lr_coeff)
    b1, b2, eps = 0.9, 0.999, 1e-8
    it = offset
    for phase in range(cfg.phases):
        lr0 = base_lr * cfg.phase_decay**phase
        z = problem.to_z(best_p)
        m = np.zeros_like(z)
        v = np.zeros_like(z)
        for i in range(1, steps + 1):
            p = problem.from_z(z, best_p)
            f, g = problem.value(p, grad=True)
            if not math.isfinite(f):
                raise FitDivergence(f"objective became non-finite at iteration {it} (phase {phase}), params {p}")
            if f < best_f:
                best_f, best_p = f, p
            if it % cfg.trace_every == 0:
                trace.append((it, best_f))
            gz = g[problem.free] * problem.dz(p)
            m = b1 * m + (1 - b1) * gz
            v = b2 * v + (1 - b2) * gz * gz
            frac = (i - 1) / max(steps - 1, 1)
            lr = lr0 * (cfg.anneal_to + (1 - cfg.anneal_to) * 0.5 * (1 + math.cos(math.pi * frac)))
            z = z - lr * (m / (1 - b1**i)) / (np.sqrt(v / (1 - b2**i)) + eps)
            it += 1
        f = problem.value(problem.from_z(z, best_p))
        if f < best_f:
            best_f, best_p = f, problem.from_z(z, best_p)
        trace.append((it, best_f))
        log.debug("phase %d done: objective %.6e", phase, best_f)
    return best_p, best_f


def _linear_init(problem: _Problem, base: MplParams) -> MplParams | None:
    """Solve for A and B (the law is linear in them) with the other params fixed."""
    tag = problem.variant.tag
    rows_a, rows_b, rhs = [], [], []
    probe_a = base.with_(L0=0.0, A=1.0, B=0.0)
    for v, y in zip(problem.views, problem.targets):
        pa = predict_view(problem.variant, probe_a, v)
        rows_a.append(pa)
        if "B" in problem.variant.free_params:
            pb = predict_view(problem.variant, base.with_(L0=0.0, A=0.0, B=1.0), v)
            rows_b.append(pb)
        rhs.append(y - base.L0)
    a = np.concatenate(rows_a)
    y = np.concatenate(rhs)
    if rows_b:
        M = np.column_stack([a, np.concatenate(rows_b)])
    else:
        M = a[:, None]
    # relative weighting matches the log-space objective
    w = 1 / np.concatenate(problem.targets)
    coef, *_ = np.linalg.lstsq(M * w[:, None], y * w, rcond=None)
    A = max(coef[0], 1e-6)
    B = max(coef[1], 1e-6 * (1 if tag != "MTL" else 1e-3)) if rows_b else base.B
    try:
        return base.with_(A=float(A), B=float(B))
    except ValueError:
        return None


def _grid_candidates(problem: _Problem, targets, mode: str) -> list[tuple[float, MplParams]]:
    free = problem.variant.free_params
    L0 = max(min(float(y.min()) for y in targets) - 0.1, 1e-3)
    base = MplParams(L0=L0, A=1.0, B=0.0, C=1.0, alpha=0.5, beta=0.5, gamma=0.0)
    if "gamma" in free:
        base = base.with_(gamma=0.5)
    if mode == "default":
        combos = [{}]
    else:
        axes = []
        if "C" in free:
            axes.append([("C", c) for c in C_GRID])
        for name in ("beta", "gamma"):
            if name in free:
                axes.append([(name, e) for e in EXP_GRID])
        combos = [dict(c) for c in itertools.product(*axes)] if axes else [{}]
    out = []
    for combo in combos:
        p = _linear_init(problem, base.with_(**combo))
        if p is None:
            continue
        f = problem.value(p)
        if math.isfinite(f):
            out.append((f, p))
    if not out:
        raise FitDivergence("no grid initialization gives a finite objective")
    out.sort(key=lambda fp: fp[0])
    return out


def _prepare(variant: LawVariant, dataset, cfg: FitConfig):
    if not dataset:
        raise ValueError("empty dataset")
    views, targets = [], []
    for s, c in dataset:
        if not isinstance(c, LossCurve):
            c = LossCurve(*c)
        steps, losses = c.steps, c.losses
        if variant.tag == "CDSL":
            steps, losses = steps[-1:], losses[-1:]
        make = CurveView.exact_view if cfg.exact_views else CurveView.coarse_view
        views.append(make(s, steps))
        targets.append(losses)
    return _Problem(variant, views, targets, cfg.delta), targets


def _fit_single(variant: LawVariant, dataset, cfg: FitConfig, trace: list) -> tuple[MplParams, float]:
    problem, targets = _prepare(variant, dataset, cfg)
    if cfg.init_mode == "explicit":
        starts = [cfg.init]
    else:
        starts = [p for _, p in _grid_candidates(problem, targets, cfg.init_mode)]
    if variant.tag not in BASELINE_TAGS or cfg.n_starts <= 1:
        return _adam(problem, starts[0], cfg, cfg.steps_per_phase, trace)

    # multi-start: short screening runs from perturbed starts, then a full run on the best
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    z0 = problem.to_z(starts[0])
    pool = [starts[0]] + [problem.from_z(z0 + rng.normal(0, 0.5, z0.shape), starts[0]) for _ in range(cfg.n_starts - 1)]
    screen = max(1, int(cfg.steps_per_phase * cfg.screen_frac))
    scored = []
    for p in pool:
        try:
            scored.append(_adam(problem, p, cfg, screen, []))
        except FitDivergence:
            continue
    if not scored:
        raise FitDivergence("every multi-start run diverged")
    best = min(scored, key=lambda pf: pf[1])[0]
    return _adam(problem, best, cfg, cfg.steps_per_phase, trace)


def fit_law(variant: LawVariant | str, dataset: Sequence[tuple[Schedule, LossCurve]], cfg: FitConfig | None = None) -> FitReport:
    """Fit ``variant`` to ``(schedule, curve)`` pairs.

    MTL accepts ``LawVariant("MTL", lam)`` for a fixed momentum or the bare tag
    ``"MTL"`` to search :data:`MTL_LAMBDA_GRID`.
    """
    cfg = cfg or FitConfig()
    search_lam = variant == "MTL"
    if isinstance(variant, str) and not search_lam:
        variant = LawVariant(variant)
    if not dataset:
        raise ValueError("empty dataset")

    lam_obj: dict[float, float] = {}
    if search_lam:
        best = None
        for lam in MTL_LAMBDA_GRID:
            trace: list = []
            v = LawVariant("MTL", lam)
            p, f = _fit_single(v, dataset, cfg, trace)
            lam_obj[lam] = f
            if best is None or f < best[2]:
                best = (v, p, f, trace)
        variant, params, obj, trace = best
    else:
        trace = []
        params, obj = _fit_single(variant, dataset, cfg, trace)

    report = FitReport(variant, params, obj, trace, lambda_objectives=lam_obj)
    preds, gts = [], []
    for s, c in dataset:
        v = CurveView.exact_view(s, c.steps) if variant.tag != "CDSL" else CurveView.exact_view(s, c.steps[-1:])
        gt = c.losses if variant.tag != "CDSL" else c.losses[-1:]
        pr = predict_view(variant, params, v)
        preds.append(pr)
        gts.append(gt)
        report.metrics.append(evaluate_metrics(pr, gt))
    report.pooled = evaluate_metrics(np.concatenate(preds), np.concatenate(gts))
    return report


def evaluate_metrics(pred, gt) -> Metrics:
    """R^2, MAE, RMSE and mean / max relative error.

    R^2 is NaN when ``gt`` has zero variance.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape or gt.size == 0:
        raise ValueError("pred and gt must be nonempty and equal length")
    if np.any(gt <= 0):
        raise ValueError("ground truth must be positive")
    d = pred - gt
    ss_tot = float(((gt - gt.mean()) ** 2).sum())
    ss_res = float((d * d).sum())
    r2 = 1 - ss_res / ss_tot if ss_tot > 0 else math.nan
    rel = np.abs(d) / gt
    return Metrics(
        r2=r2,
        mae=float(np.abs(d).mean()),
        rmse=math.sqrt(ss_res / d.size),
        prede=float(rel.mean()),
        worste=float(rel.max()),
    )


def fit_two_stage_reduction(x, ld, delta: float = 1e-2, beta_fixed: float | None = None,
                            steps: int = 20_000, lr: float = 1e-2) -> tuple[float, float, float]:
    """Fit ``LD(x) = B (1 - (C x + 1) ** -beta)`` to loss-reduction samples.

    The log-space Huber objective is minimized with Adam over ``log B``,
    ``log C`` and ``logit beta``; only positive samples enter the objective.
    """
    x = np.asarray(x, dtype=np.float64)
    ld = np.asarray(ld, dtype=np.float64)
    if x.shape != ld.shape or x.ndim != 1:
        raise ValueError("x and ld must be equal-length 1-d arrays")
    if not np.any(ld > 0):
        raise ValueError("loss-reduction samples are all zero")
    m = (ld > 0) & (x > 0)
    x, ld = x[m], ld[m]
    logy = np.log(ld)

    # initial guess: asymptote from the tail, slope from the first sample
    b0 = float(ld.max())
    beta0 = beta_fixed if beta_fixed is not None else 0.4
    frac = min(ld[0] / b0, 0.99)
    c0 = max(((1 - frac) ** (-1 / beta0) - 1) / x[0], 1e-8)
    z = np.array([math.log(b0), math.log(c0), math.log(beta0 / (1 - beta0))])
    fit_beta = beta_fixed is None

    def obj(z):
        B, C = math.exp(z[0]), math.exp(z[1])
        beta = 1 / (1 + math.exp(-z[2]))
        lc = np.log1p(C * x)
        pw = np.exp(-beta * lc)
        G = -np.expm1(-beta * lc)
        r = np.log(B) + np.log(G) - logy
        hg = huber_grad(r, delta)
        # d log G / d(.) = (dG/d.) / G
        dC = (beta * pw * x / (C * x + 1)) / G * C
        dbeta = (pw * lc) / G * beta * (1 - beta)
        g = np.array([hg.sum(), (hg * dC).sum(), (hg * dbeta).sum() if fit_beta else 0.0])
        return float(huber(r, delta).sum()), g

    m1 = np.zeros(3)
    v1 = np.zeros(3)
    best = (math.inf, z.copy())
    for i in range(1, steps + 1):
        f, g = obj(z)
        if not math.isfinite(f):
            raise FitDivergence("two-stage reduction fit diverged")
        if f < best[0]:
            best = (f, z.copy())
        m1 = 0.9 * m1 + 0.1 * g
        v1 = 0.999 * v1 + 0.001 * g * g
        step_lr = lr * 0.5 * (1 + math.cos(math.pi * (i - 1) / steps))
        z = z - step_lr * (m1 / (1 - 0.9**i)) / (np.sqrt(v1 / (1 - 0.999**i)) + 1e-12)
    z = best[1]
    return math.exp(z[0]), math.exp(z[1]), 1 / (1 + math.exp(-z[2]))
