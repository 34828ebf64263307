"""Multi-power loss-curve law, its variants and analytic parameter gradients.

The main law predicts the loss at post-warmup step ``t`` as::

    L0 + A * (S1(t) + S_W) ** -alpha - LD(t)
    LD(t) = B * sum_k (eta_{k-1} - eta_k) * G(eta_k ** -gamma * S_k(t))
    G(x)  = 1 - (C x + 1) ** -beta

Evaluation works on a :class:`CurveView`: a list of target steps plus a list of
LR drops. The exact view has one drop per step where the LR changes. The
coarse view merges the drops inside each validation interval into a single
moment-matched drop, which makes fitting cost independent of ``T``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .schedules import Schedule

__all__ = [
    "PARAM_NAMES",
    "VARIANT_TAGS",
    "MTL_LAMBDA_GRID",
    "MplParams",
    "LawVariant",
    "LossCurve",
    "CurveView",
    "g_saturation",
    "loss_reduction",
    "predict",
    "predict_gradient",
    "predict_view",
    "mtl_double_sum",
    "save_params",
    "load_params",
]

PARAM_NAMES = ("L0", "A", "B", "C", "alpha", "beta", "gamma")
EXPONENTS = frozenset({"alpha", "beta", "gamma"})
VARIANT_TAGS = ("MPL", "OPL", "LLDL", "NoGamma", "SPL", "MEL", "MTL", "CDSL")
MTL_LAMBDA_GRID = (0.95, 0.99, 0.995, 0.999, 0.9995)

# parameters each variant actually uses
_FREE = {
    "MPL": PARAM_NAMES,
    "OPL": ("L0", "A", "alpha"),
    "LLDL": ("L0", "A", "B", "alpha"),
    "NoGamma": ("L0", "A", "B", "C", "alpha", "beta"),
    "SPL": ("L0", "A", "B", "C", "alpha", "beta"),
    "MEL": ("L0", "A", "B", "C", "alpha"),
    "MTL": ("L0", "A", "B", "alpha"),
    "CDSL": ("L0", "A", "alpha"),
}

# pairwise (target x drop) block size
_BLOCK = 1 << 21


@dataclass(frozen=True)
class MplParams:
    L0: float
    A: float
    B: float
    C: float
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        for name in PARAM_NAMES:
            v = float(getattr(self, name))
            object.__setattr__(self, name, v)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
            # zero is allowed so that variants can switch a term off
            if name in EXPONENTS:
                if not 0 <= v < 1:
                    raise ValueError(f"{name} must lie in [0, 1), got {v}")
            elif v < 0:
                raise ValueError(f"{name} must be nonnegative, got {v}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES])

    @classmethod
    def from_array(cls, x) -> "MplParams":
        return cls(*map(float, x))

    def with_(self, **kw) -> "MplParams":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LawVariant:
    tag: str = "MPL"
    lam: float | None = None

    def __post_init__(self):
        if self.tag not in VARIANT_TAGS:
            raise ValueError(f"unknown law variant {self.tag!r}; expected one of {VARIANT_TAGS}")
        if self.tag == "MTL":
            if self.lam is None or not 0 < self.lam < 1:
                raise ValueError(f"MTL needs a momentum lam in (0, 1), got {self.lam}")
        elif self.lam is not None:
            raise ValueError(f"{self.tag} takes no momentum parameter")

    @property
    def free_params(self) -> tuple[str, ...]:
        return _FREE[self.tag]

    def to_dict(self) -> dict:
        d = {"tag": self.tag}
        if self.lam is not None:
            d["lam"] = self.lam
        return d


@dataclass(frozen=True, eq=False)
class LossCurve:
    steps: np.ndarray
    losses: np.ndarray

    def __post_init__(self):
        steps = np.asarray(self.steps)
        losses = np.asarray(self.losses, dtype=np.float64).reshape(-1)
        if steps.ndim != 1 or steps.shape != losses.shape or steps.size == 0:
            raise ValueError("steps and losses must be nonempty 1-d arrays of equal length")
        if not np.all(steps == np.round(steps)):
            raise ValueError("steps must be integers")
        steps = steps.astype(np.int64)
        if steps[0] < 1 or np.any(np.diff(steps) <= 0):
            raise ValueError("steps must be strictly increasing positive integers")
        if not np.all(np.isfinite(losses)) or np.any(losses <= 0):
            raise ValueError("losses must be finite and positive")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "losses", losses)

    def __len__(self):
        return int(self.steps.size)


def g_saturation(x, C: float, beta: float):
    """``1 - (C x + 1) ** -beta``."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("saturation argument must be nonnegative")
    out = -np.expm1(-beta * np.log1p(C * x))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class CurveView:
    """Targets and LR drops of one schedule, ready for pairwise evaluation.

    ``drop_key[j] <= t[i]`` decides whether drop ``j`` acts on target ``i``.
    ``drop_pos`` is the (possibly fractional) step where the drop happens and
    ``drop_sbefore`` is ``S1`` just before it, so ``S_k(t) = s1[i] - drop_sbefore[j]``.
    """

    t: np.ndarray
    s1: np.ndarray
    eta: np.ndarray
    eta0: float
    warmup_sum: float
    drop_key: np.ndarray
    drop_pos: np.ndarray
    drop_sbefore: np.ndarray
    drop_eta: np.ndarray
    drop_delta: np.ndarray
    exact: bool = True
    _blocks: list = field(default_factory=list, repr=False)

    @classmethod
    def exact_view(cls, s: Schedule, steps) -> "CurveView":
        steps = _check_steps(s, steps)
        delta = -np.diff(s.lrs)
        k = np.flatnonzero(delta != 0) + 1
        k = k[k <= steps.max()]
        return cls(
            t=steps.astype(np.float64),
            s1=s.cumulative[steps],
            eta=s.lrs[steps],
            eta0=s.peak_lr,
            warmup_sum=s.warmup_sum,
            drop_key=k.astype(np.float64),
            drop_pos=k.astype(np.float64),
            drop_sbefore=s.cumulative[k - 1],
            drop_eta=s.lrs[k],
            drop_delta=delta[k - 1],
            exact=True,
        )

    @classmethod
    def coarse_view(cls, s: Schedule, steps) -> "CurveView":
        """Merge drops within each interval ``(v_{i-1}, v_i]`` into one per sign.

        The merged drop sits at the |drop|-weighted mean of position, prior LR
        sum and post-drop LR, which makes the error second order in the
        interval width.
        """
        steps = _check_steps(s, steps)
        delta = -np.diff(s.lrs)[: steps[-1]]
        k = np.arange(1, steps[-1] + 1)
        interval = np.searchsorted(steps, k)  # k in (v_{i-1}, v_i] -> i
        keys, pos, sb, eta, dsum = [], [], [], [], []
        for sign in (1.0, -1.0):
            m = sign * delta > 0
            if not m.any():
                continue
            idx = interval[m]
            w = np.abs(delta[m])
            n = steps.size
            wsum = np.bincount(idx, w, n)
            has = wsum > 0
            dtot = np.bincount(idx, delta[m], n)[has]
            wsum = wsum[has]

            def centroid(v, _idx=idx, _w=w, _has=has, _wsum=wsum):
                return np.bincount(_idx, _w * v, n)[_has] / _wsum

            keys.append(steps[has].astype(np.float64))
            pos.append(centroid(k[m].astype(np.float64)))
            sb.append(centroid(s.cumulative[k[m] - 1]))
            eta.append(centroid(s.lrs[k[m]]))
            dsum.append(dtot)
        cat = (lambda xs: np.concatenate(xs)) if keys else (lambda xs: np.zeros(0))
        return cls(
            t=steps.astype(np.float64),
            s1=s.cumulative[steps],
            eta=s.lrs[steps],
            eta0=s.peak_lr,
            warmup_sum=s.warmup_sum,
            drop_key=cat(keys),
            drop_pos=cat(pos),
            drop_sbefore=cat(sb),
            drop_eta=cat(eta),
            drop_delta=cat(dsum),
            exact=False,
        )

    @property
    def n_targets(self) -> int:
        return int(self.t.size)

    def blocks(self):
        """Target-row slices whose pairwise arrays stay within the block budget."""
        if not self._blocks:
            nd = max(1, self.drop_key.size)
            rows = max(1, _BLOCK // nd)
            self._blocks.extend(slice(i, min(i + rows, self.n_targets)) for i in range(0, self.n_targets, rows))
        return self._blocks


def _check_steps(s: Schedule, steps) -> np.ndarray:
    steps = np.atleast_1d(np.asarray(steps))
    if steps.size == 0:
        raise ValueError("no steps requested")
    if not np.all(steps == np.round(steps)):
        raise ValueError("steps must be integers")
    steps = steps.astype(np.int64)
    if steps.min() < 1 or steps.max() > s.total_steps:
        raise IndexError(f"steps must lie in [1, {s.total_steps}] (schedule length)")
    return steps


def _ld_block(variant: LawVariant, p: MplParams, v: CurveView, rows: slice, grad: bool):
    """Loss reduction over a block of targets, divided by B.

    Returns ``(ld, dC, dbeta, dgamma)`` where the partials are of ``LD / B``.
    """
    t = v.t[rows, None]
    active = v.drop_key[None, :] <= t
    d = np.where(active, v.drop_delta[None, :], 0.0)
    n = t.shape[0]
    zeros = np.zeros(n)
    tag = variant.tag

    if tag == "MTL":
        lam = variant.lam
        age = np.maximum(t - v.drop_pos[None, :] + 1, 0.0)
        g = -np.expm1(age * math.log(lam)) / (1 - lam)
        return (d * g).sum(1), zeros, zeros, zeros

    sk = np.maximum(v.s1[rows, None] - v.drop_sbefore[None, :], 0.0)
    eta_k = v.drop_eta[None, :]
    log_eta = None
    if tag == "SPL":
        x = np.maximum(t - v.drop_pos[None, :] + 1, 0.0)
    elif tag in ("MEL", "NoGamma") or p.gamma == 0:
        x = sk
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            log_eta = np.log(eta_k)
            x = np.where(eta_k > 0, np.exp(-p.gamma * log_eta) * sk, np.where(sk > 0, np.inf, 0.0))

    if tag == "MEL":
        e = np.exp(-p.C * x)
        ld = (d * -np.expm1(-p.C * x)).sum(1)
        if not grad:
            return ld, zeros, zeros, zeros
        return ld, (d * x * e).sum(1), zeros, zeros

    with np.errstate(over="ignore", invalid="ignore"):
        lc = np.log1p(p.C * x)
        pw = np.exp(-p.beta * lc)  # (Cx+1)^-beta
        ld = (d * -np.expm1(-p.beta * lc)).sum(1)
        if not grad:
            return ld, zeros, zeros, zeros
        finite = np.isfinite(x)
        # q = beta (Cx+1)^(-beta-1); dG/dC = q x, dG/dx = q C
        q = np.where(finite, p.beta * pw / (p.C * x + 1), 0.0)
        dC = (d * np.where(finite, q * x, 0.0)).sum(1)
        dbeta = (d * np.where(finite, pw * lc, 0.0)).sum(1)
        if log_eta is not None and tag == "MPL":
            ok = finite & (eta_k > 0)
            dgamma = (d * np.where(ok, -p.C * q * x * log_eta, 0.0)).sum(1)
        else:
            dgamma = zeros
    return ld, dC, dbeta, dgamma


def predict_view(variant: LawVariant, p: MplParams, v: CurveView, grad: bool = False):
    """Predictions at every target of ``v``; with ``grad`` also the ``(n, 7)`` Jacobian."""
    tag = variant.tag
    n = v.n_targets
    jac = np.zeros((n, 7)) if grad else None
    base = v.t if tag == "CDSL" else v.s1 + v.warmup_sum
    if np.any(base <= 0):
        raise ValueError("power term undefined: LR area is zero at a target step")
    logu = np.log(base)
    power = np.exp(-p.alpha * logu)
    pred = p.L0 + p.A * power
    if grad:
        jac[:, 0] = 1.0
        jac[:, 1] = power
        jac[:, 4] = -p.A * power * logu

    if tag == "LLDL":
        red = v.eta0 - v.eta
        pred = pred - p.B * red
        if grad:
            jac[:, 2] = -red
    elif tag not in ("OPL", "CDSL") and v.drop_key.size:
        for rows in v.blocks():
            ld, dC, dbeta, dgamma = _ld_block(variant, p, v, rows, grad)
            pred[rows] -= p.B * ld
            if grad:
                jac[rows, 2] = -ld
                if tag != "MTL":
                    jac[rows, 3] = -p.B * dC
                if tag in ("MPL", "NoGamma", "SPL"):
                    jac[rows, 5] = -p.B * dbeta
                if tag == "MPL":
                    jac[rows, 6] = -p.B * dgamma
    if grad:
        return pred, jac
    return pred


def predict(variant: LawVariant | str, p: MplParams, s: Schedule, steps) -> np.ndarray:
    """Predicted loss at ``steps`` of schedule ``s`` (exact per-step drops)."""
    if isinstance(variant, str):
        variant = LawVariant(variant)
    return predict_view(variant, p, CurveView.exact_view(s, steps))


def predict_gradient(p: MplParams, s: Schedule, steps, variant: LawVariant | str = "MPL") -> np.ndarray:
    """``(len(steps), 7)`` partials of the prediction in :data:`PARAM_NAMES` order."""
    if isinstance(variant, str):
        variant = LawVariant(variant)
    return predict_view(variant, p, CurveView.exact_view(s, steps), grad=True)[1]


def loss_reduction(p: MplParams, s: Schedule, t: int) -> float:
    """``LD(t)`` of the main law."""
    v = CurveView.exact_view(s, [t])
    if not v.drop_key.size:
        return 0.0
    return float(p.B * _ld_block(LawVariant("MPL"), p, v, slice(0, 1), False)[0][0])


def mtl_double_sum(s: Schedule, lam: float, t: int) -> float:
    """``sum_{i<=t} sum_{k<=i} (eta_{k-1} - eta_k) lam^(i-k)`` by direct looping."""
    if not 0 < lam < 1:
        raise ValueError(f"lam must lie in (0, 1), got {lam}")
    if not 1 <= t <= s.total_steps:
        raise IndexError(f"step {t} outside [1, {s.total_steps}]")
    lrs = [float(x) for x in s.lrs[: t + 1]]
    total = 0.0
    for i in range(1, t + 1):
        for k in range(1, i + 1):
            total += (lrs[k - 1] - lrs[k]) * lam ** (i - k)
    return total


def save_params(p: MplParams, variant: LawVariant, path) -> None:
    Path(path).write_text(json.dumps({"variant": variant.to_dict(), "params": p.to_dict()}, indent=1))


def load_params(path) -> tuple[MplParams, LawVariant]:
    d = json.loads(Path(path).read_text())
    return MplParams(**d["params"]), LawVariant(**d.get("variant", {"tag": "MPL"}))


def views_for(dataset: Iterable, exact: bool = False) -> list[CurveView]:
    """One view per ``(schedule, curve)`` pair at the curve's steps."""
    make = CurveView.exact_view if exact else CurveView.coarse_view
    return [make(s, c.steps) for s, c in dataset]
