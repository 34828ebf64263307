"""Schedule optimization against a fitted law, and schedule-shape analysis.

The schedule is parameterized by its per-step reductions
``delta_t = eta_{t-1} - eta_t`` starting from all zeros (the constant
schedule). Each Adam step is followed by a projection onto monotone
nonnegative schedules.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .laws import CurveView, LawVariant, MplParams, predict_view
from .schedules import Schedule

__all__ = [
    "OptConfig",
    "OptResult",
    "PhaseReport",
    "STEP_SIZE_GRID",
    "COORDINATE_STEP_SIZE_GRID",
    "WSD_DECAY_GRID",
    "final_loss_and_grad",
    "optimize_schedule",
    "predicted_final_loss",
    "detect_phases",
    "project_reductions",
]

log = logging.getLogger(__name__)

STEP_SIZE_GRID = (1e-4, 1e-5, 1e-6, 1e-7, 1e-8)
# grid for per-coordinate Adam, where every coordinate moves by about the step size
COORDINATE_STEP_SIZE_GRID = (2e-8, 1e-8, 5e-9, 2e-9, 1e-9)
WSD_DECAY_GRID = (3000, 4000, 5000, 6000, 7000)


@dataclass
class OptConfig:
    T: int = 24_000
    eta0: float = 3e-4
    warmup_steps: int = 2160
    step_sizes: tuple[float, ...] = STEP_SIZE_GRID
    iters: int = 50_000
    eps_clamp: float = 1e-10
    # "shared": one second-moment estimate for all coordinates (keeps the
    # gradient direction); "coordinate": textbook per-coordinate Adam
    moment: str = "shared"
    # pairwise Frank-Wolfe steps applied to the best Adam schedule
    polish_steps: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("horizon must be at least 2 steps")
        if not self.eta0 > 0 or not self.eps_clamp > 0:
            raise ValueError("eta0 and eps_clamp must be positive")
        if not self.step_sizes or any(s <= 0 for s in self.step_sizes):
            raise ValueError("step sizes must be positive")
        if self.iters < 1 or self.polish_steps < 0:
            raise ValueError("need at least one iteration and nonnegative polish steps")
        if self.moment not in ("shared", "coordinate"):
            raise ValueError(f"moment must be 'shared' or 'coordinate', got {self.moment!r}")
        self.step_sizes = tuple(float(s) for s in self.step_sizes)


@dataclass
class OptResult:
    schedule: Schedule
    final_loss: float
    step_size: float
    losses_by_step_size: dict[float, float] = field(default_factory=dict)
    best_trace: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class PhaseReport:
    T_stable: int
    decay_exponent: float
    final_lr_ratio: float

    @property
    def has_decay(self) -> bool:
        return not math.isnan(self.decay_exponent)

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isnan(self.decay_exponent):
            d["decay_exponent"] = None
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def predicted_final_loss(variant: LawVariant | str, p: MplParams, s: Schedule) -> float:
    if isinstance(variant, str):
        variant = LawVariant(variant)
    return float(predict_view(variant, p, CurveView.exact_view(s, [s.total_steps]))[0])


def project_reductions(delta: np.ndarray, eta0: float, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Project reductions onto feasible monotone schedules.

    Feasibility is ``delta >= 0`` with ``sum(delta) <= eta0``, a capped
    simplex; the Euclidean projection onto it clips negatives and, when the
    budget is exceeded, subtracts a common threshold. Implied LRs at or below
    ``eps`` are then pinned to exactly zero.
    """
    d = np.clip(delta, 0.0, eta0)
    if d.sum() > eta0:
        u = np.sort(d)[::-1]
        excess = np.cumsum(u) - eta0
        rho = np.flatnonzero(u * np.arange(1, u.size + 1) > excess)[-1]
        d = np.maximum(d - excess[rho] / (rho + 1), 0.0)
    eta = eta0 - np.cumsum(d)
    eta[eta <= eps] = 0.0
    d = -np.diff(eta, prepend=eta0)
    return d, eta


def final_loss_and_grad(variant: LawVariant, p: MplParams, eta: np.ndarray, eta0: float,
                        warmup_sum: float, eps: float = 0.0) -> tuple[float, np.ndarray]:
    """Predicted loss at the last step and its gradient w.r.t. the reductions.

    O(T) in time and memory, using suffix sums over the horizon.
    """
    eta = np.asarray(eta, dtype=np.float64)
    T = eta.size
    d = -np.diff(eta, prepend=eta0)
    # S_k(T) for k = 1..T
    sk = np.cumsum(eta[::-1])[::-1]
    u = sk[0] + warmup_sum
    remaining = np.arange(T, 0, -1, dtype=np.float64)  # T - j + 1
    power = p.A * u ** -p.alpha
    loss = p.L0 + power
    # dS1/d delta_j = -(T - j + 1)
    grad = p.alpha * power / u * remaining

    tag = variant.tag
    if tag == "OPL":
        return loss, grad
    if tag == "MTL":
        lam = variant.lam
        c = -np.expm1(remaining * math.log(lam)) / (1 - lam)
        return loss - p.B * float(d @ c), grad - p.B * c
    if tag not in ("MPL", "NoGamma"):
        raise ValueError(f"schedule optimization supports MPL, NoGamma, MTL and OPL, not {tag}")

    gamma = p.gamma if tag == "MPL" else 0.0
    live = eta > eps
    with np.errstate(divide="ignore"):
        scale = np.where(live, eta, 1.0) ** -gamma
    x = np.where(live, scale * sk, 0.0)
    lc = np.log1p(p.C * x)
    G = -np.expm1(-p.beta * lc)
    gp = np.where(live, p.beta * p.C * np.exp(-(p.beta + 1) * lc), 0.0)  # G'(x)
    loss -= p.B * float(d @ G)

    # sum_k d_k G'_k dx_k/d delta_j, with dx_k/d delta_j =
    #   gamma eta_k^(-gamma-1) S_k [j <= k] - eta_k^-gamma (T - max(j, k) + 1)
    w = d * gp * scale
    through_eta = np.cumsum(w * gamma / np.where(live, eta, 1.0) * sk)  # sum_{k <= j}
    suffix_eta = through_eta[-1] - np.concatenate(([0.0], through_eta[:-1]))  # sum_{k >= j}
    wr = w * remaining
    suffix_wr = np.cumsum(wr[::-1])[::-1]
    prefix_w = np.concatenate(([0.0], np.cumsum(w)[:-1]))  # sum_{k < j}
    via_sum = remaining * prefix_w + suffix_wr
    grad = grad - p.B * (G + suffix_eta - via_sum)
    return loss, grad


def _run(variant, p, cfg: OptConfig, lr: float):
    eta0, eps, T = cfg.eta0, cfg.eps_clamp, cfg.T
    sw = 0.5 * eta0 * cfg.warmup_steps
    delta = np.zeros(T)
    eta = np.full(T, eta0)
    m = np.zeros(T)
    v = np.zeros(T) if cfg.moment == "coordinate" else 0.0
    b1, b2, tiny = 0.9, 0.999, 1e-30
    best_f, best_eta = math.inf, eta.copy()
    trace = []
    for i in range(1, cfg.iters + 1):
        f, g = final_loss_and_grad(variant, p, eta, eta0, sw, eps)
        if not math.isfinite(f) or not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite surrogate at iteration {i} (step size {lr})")
        if f < best_f:
            best_f, best_eta = f, eta.copy()
        if i % 1000 == 1:
            trace.append(best_f)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g if cfg.moment == "coordinate" else float(g @ g) / T)
        delta = delta - lr * (m / (1 - b1**i)) / (np.sqrt(v / (1 - b2**i)) + tiny)
        delta, eta = project_reductions(delta, eta0, eps)
    f, _ = final_loss_and_grad(variant, p, eta, eta0, sw, eps)
    if f < best_f:
        best_f, best_eta = f, eta.copy()
    trace.append(best_f)
    return best_f, best_eta, trace


def _polish(variant, p, eta, cfg: OptConfig, steps: int):
    """Pairwise Frank-Wolfe on the capped simplex of reductions.

    Each step moves LR reduction from the support coordinate with the largest
    gradient (or from the unused budget) to the coordinate with the smallest
    gradient (or back to the unused budget), with an exact line search on the
    directional derivative. Only loss-decreasing steps are taken, so the
    result is never worse than the input. The iterates stay sparse, which lets
    the search land on vertex-like optima that Adam only approaches.
    """
    eta0, eps = cfg.eta0, cfg.eps_clamp
    sw = 0.5 * eta0 * cfg.warmup_steps
    d = -np.diff(eta, prepend=eta0)
    f, g = final_loss_and_grad(variant, p, eta, eta0, sw, eps)

    def moved(m, j_to, j_from):
        dd = d.copy()
        if j_to >= 0:
            dd[j_to] += m
        if j_from >= 0:
            dd[j_from] -= m
        return project_reductions(dd, eta0, eps)[1]

    for _ in range(steps):
        j_to = int(np.argmin(g))
        g_to = g[j_to]
        if g_to >= 0:
            j_to, g_to = -1, 0.0
        support = np.flatnonzero(d > 0)
        j_from, g_from, cap = -1, 0.0, eta0 - d.sum()
        if support.size:
            k = support[np.argmax(g[support])]
            if cap <= 0 or g[k] > 0:
                j_from, g_from, cap = int(k), g[k], d[k]
        if j_to == j_from or cap <= 0 or g_from - g_to <= 0:
            break

        def slope(m):
            e = moved(m, j_to, j_from)
            fm, gm = final_loss_and_grad(variant, p, e, eta0, sw, eps)
            return fm, (gm[j_to] if j_to >= 0 else 0.0) - (gm[j_from] if j_from >= 0 else 0.0), e

        f_hi, s_hi, e_hi = slope(cap)
        if s_hi <= 0:
            m_best = cap
        else:
            lo, hi = 0.0, cap
            for _ in range(50):
                mid = 0.5 * (lo + hi)
                if slope(mid)[1] < 0:
                    lo = mid
                else:
                    hi = mid
            m_best = lo
        e_new = moved(m_best, j_to, j_from)
        f_new, g_new = final_loss_and_grad(variant, p, e_new, eta0, sw, eps)
        if not f_new < f:
            break
        f, g, eta = f_new, g_new, e_new
        d = -np.diff(eta, prepend=eta0)
    return f, eta


def optimize_schedule(variant: LawVariant | str, p: MplParams, cfg: OptConfig | None = None) -> OptResult:
    """Minimize the predicted final loss over monotone schedules.

    Runs the projected Adam loop once per step size and keeps the schedule
    with the lowest predicted final loss over all runs and iterations.
    """
    cfg = cfg or OptConfig()
    if isinstance(variant, str):
        variant = LawVariant(variant)
    best = None
    by_lr = {}
    for lr in cfg.step_sizes:
        f, eta, trace = _run(variant, p, cfg, lr)
        by_lr[lr] = f
        log.info("step size %.1e: predicted final loss %.6f", lr, f)
        if best is None or f < best[0]:
            best = (f, eta, lr, trace)
    f, eta, lr, trace = best
    if cfg.polish_steps:
        f_pol, eta_pol = _polish(variant, p, eta, cfg, cfg.polish_steps)
        if f_pol < f:
            f, eta = f_pol, eta_pol
        trace.append(f)
    sched = Schedule(cfg.warmup_steps, cfg.eta0, eta, "explicit", {"optimized_for": variant.tag})
    return OptResult(sched, f, lr, by_lr, trace)


def detect_phases(s: Schedule, tol: float = 0.02) -> PhaseReport:
    """Split a monotone schedule into a stable phase and a decay phase.

    ``T_stable`` is the last step whose LR is within ``tol`` of the peak. The
    decay exponent ``p`` is the least-squares slope of ``log(eta_t - eta_T)``
    against ``log(T - t)`` over the decay phase, so a decay of the form
    ``eta_T + c (T - t) ** p`` gives back ``p`` exactly. It is NaN when there is
    no decay phase.
    """
    if not s.is_monotone:
        raise ValueError("phase detection needs a monotone nonincreasing schedule")
    if not 0 <= tol < 1:
        raise ValueError("tol must lie in [0, 1)")
    lrs = s.post_lrs
    T = lrs.size
    flat = np.flatnonzero(lrs >= (1 - tol) * s.peak_lr)
    t_stable = int(flat[-1]) + 1 if flat.size else 0
    ratio = float(lrs[-1] / s.peak_lr)
    t = np.arange(t_stable + 1, T + 1)
    gap = lrs[t_stable:] - lrs[-1]
    ok = (gap > 0) & (t < T)
    if t_stable >= T or ok.sum() < 2:
        return PhaseReport(t_stable, math.nan, ratio)
    X = np.log(T - t[ok])
    Y = np.log(gap[ok])
    slope = np.polyfit(X, Y, 1)[0]
    return PhaseReport(t_stable, float(slope), ratio)
