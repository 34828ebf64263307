"""Learning-rate schedules and their prefix sums.

Step indexing follows the post-warmup convention: ``t = 1`` is the first step
after a linear warmup of ``W`` steps, and ``eta_0`` is the peak LR reached at
the end of warmup. A :class:`Schedule` stores ``eta_1 .. eta_T``; index 0 of
:attr:`Schedule.lrs` is the peak.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np

__all__ = [
    "Schedule",
    "StageSpec",
    "SCHEDULE_KINDS",
    "make_schedule",
    "lr_prefix_sum",
    "equivalent_step",
    "lr_area_at",
    "lr_area_from_samples",
    "save_schedule",
    "load_schedule",
    "validation_grid",
]

SCHEDULE_KINDS = (
    "constant",
    "cosine",
    "wsd",
    "wsdld",
    "wsd_cosine",
    "wsdsc",
    "two_stage",
    "multi_stage",
    "cyclic",
    "random_polyline",
    "explicit",
)

MONOTONE_KINDS = frozenset(
    {"constant", "cosine", "wsd", "wsdld", "wsd_cosine", "wsdsc", "two_stage", "multi_stage"}
)


@dataclass(frozen=True)
class StageSpec:
    """An n-stage step schedule.

    Stage ``i`` (1-based) covers steps ``boundaries[i-1] + 1 .. boundaries[i]``
    at ``stage_lrs[i-1]``; steps ``1 .. boundaries[0]`` run at the peak LR.
    """

    boundaries: tuple[int, ...]
    stage_lrs: tuple[float, ...]

    def __post_init__(self):
        b = tuple(int(x) for x in self.boundaries)
        lrs = tuple(float(x) for x in self.stage_lrs)
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(self, "stage_lrs", lrs)
        if len(b) != len(lrs) + 1:
            raise ValueError(
                f"need n+1 boundaries for n stages, got {len(b)} boundaries and {len(lrs)} stages"
            )
        if b[0] < 0 or any(b1 >= b2 for b1, b2 in zip(b, b[1:])):
            raise ValueError(f"boundaries must be strictly increasing and >= 0: {b}")
        if any(lr <= 0 for lr in lrs):
            raise ValueError("stage LRs must be positive")
        if any(l1 <= l2 for l1, l2 in zip(lrs, lrs[1:])):
            raise ValueError(f"stage LRs must be strictly decreasing: {lrs}")

    @property
    def total_steps(self) -> int:
        return self.boundaries[-1]

    def lr_reductions(self, peak_lr: float) -> np.ndarray:
        """Per-stage reductions ``eta^(i-1) - eta^(i)`` with ``eta^(0) = peak_lr``."""
        lrs = np.array((peak_lr,) + self.stage_lrs)
        return lrs[:-1] - lrs[1:]


@dataclass(frozen=True, eq=False)
class Schedule:
    """An immutable post-warmup learning-rate schedule."""

    warmup_steps: int
    peak_lr: float
    post_lrs: np.ndarray
    kind: str = "explicit"
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        lrs = np.array(self.post_lrs, dtype=np.float64).reshape(-1)
        if lrs.size < 1:
            raise ValueError("schedule needs at least one post-warmup step")
        if not np.all(np.isfinite(lrs)):
            raise ValueError("schedule contains non-finite learning rates")
        if np.any(lrs < 0):
            i = int(np.argmax(lrs < 0)) + 1
            raise ValueError(f"negative learning rate at step {i}: {lrs[i - 1]}")
        if not (self.peak_lr > 0 and math.isfinite(self.peak_lr)):
            raise ValueError(f"peak_lr must be positive, got {self.peak_lr}")
        if int(self.warmup_steps) != self.warmup_steps or self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be a nonnegative integer, got {self.warmup_steps}")
        lrs.flags.writeable = False
        object.__setattr__(self, "post_lrs", lrs)
        object.__setattr__(self, "warmup_steps", int(self.warmup_steps))
        object.__setattr__(self, "peak_lr", float(self.peak_lr))

    def __len__(self) -> int:
        return self.total_steps

    @property
    def total_steps(self) -> int:
        return int(self.post_lrs.size)

    @cached_property
    def lrs(self) -> np.ndarray:
        """``eta_0 .. eta_T`` with ``eta_0`` the peak LR."""
        out = np.concatenate(([self.peak_lr], self.post_lrs))
        out.flags.writeable = False
        return out

    @cached_property
    def cumulative(self) -> np.ndarray:
        """``S_1(t)`` for ``t = 0 .. T`` (``S_1(0) = 0``).

        Accumulated in extended precision so ``S_1(T)`` stays within a few ulps
        of the exact sum at ``T ~ 1e5``.
        """
        acc = np.cumsum(self.post_lrs.astype(np.longdouble))
        out = np.concatenate(([0.0], acc.astype(np.float64)))
        out.flags.writeable = False
        return out

    @property
    def warmup_sum(self) -> float:
        """LR area of the linear warmup, ``peak_lr * W / 2``."""
        return 0.5 * self.peak_lr * self.warmup_steps

    @property
    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.lrs) <= 0))

    def lr(self, t):
        """LR at step(s) ``t`` in ``[0, T]``."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.total_steps):
            raise IndexError(f"step outside [0, {self.total_steps}]")
        return self.lrs[t]

    def truncated(self, t: int) -> "Schedule":
        """First ``t`` post-warmup steps as an explicit schedule."""
        if not 1 <= t <= self.total_steps:
            raise IndexError(f"cannot truncate to {t} steps")
        return Schedule(self.warmup_steps, self.peak_lr, self.post_lrs[:t], "explicit")

    def to_dict(self, include_lrs: bool | None = None) -> dict[str, Any]:
        if include_lrs is None:
            include_lrs = self.kind == "explicit"
        out = {
            "kind": self.kind,
            "W": self.warmup_steps,
            "peak_lr": self.peak_lr,
            "T": self.total_steps,
            "params": dict(self.params),
        }
        if include_lrs:
            out["post_lrs"] = [float(x) for x in self.post_lrs]
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Schedule":
        if "post_lrs" in d:
            return cls(
                int(d.get("W", 0)),
                float(d["peak_lr"]),
                np.asarray(d["post_lrs"], dtype=np.float64),
                d.get("kind", "explicit"),
                dict(d.get("params", {})),
            )
        return make_schedule(d["kind"], int(d.get("W", 0)), int(d["T"]), float(d["peak_lr"]), **d.get("params", {}))


def _check_T(T: int) -> int:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    return int(T)


def _decay_start(T: int, params: dict) -> int:
    if "T_stable" in params:
        ts = int(params.pop("T_stable"))
    elif "decay_steps" in params:
        ts = T - int(params.pop("decay_steps"))
    else:
        raise ValueError("WSD schedules need T_stable or decay_steps")
    if not 0 <= ts < T:
        raise ValueError(f"T_stable must satisfy 0 <= T_stable < T, got {ts} with T={T}")
    return ts


def make_schedule(kind: str, W: int, T: int, peak_lr: float, **params) -> Schedule:
    """Build a schedule of a named kind.

    Kinds and their parameters:

    - ``constant``
    - ``cosine``: ``alpha_end`` (default 0.1), the final LR as a fraction of peak
    - ``wsd`` / ``wsdld`` / ``wsd_cosine``: exponential, linear or cosine decay
      from ``T_stable`` (or ``T - decay_steps``) to ``end_lr`` at step ``T``
    - ``wsdsc``: ``eta_max * ((T - t) / (T - T_stable)) ** 1.5`` in the decay phase
    - ``two_stage``: ``lr_b``, ``T_A``; steps ``1..T_A`` at peak, then ``lr_b``
    - ``multi_stage``: ``boundaries``, ``stage_lrs`` (see :class:`StageSpec`); ``T``
      must equal the last boundary
    - ``cyclic``: ``lr_lo``, ``half_cycle``, ``first_decay``; linear triangles
      between peak and ``lr_lo`` after a flat prefix
    - ``random_polyline``: ``lr_lo``, ``lr_hi``, ``interval``, ``seed``; piecewise
      linear through milestones every ``interval`` steps, drawn uniformly in
      ``[lr_lo, lr_hi]``
    """
    T = _check_T(T)
    if not peak_lr > 0:
        raise ValueError(f"peak_lr must be positive, got {peak_lr}")
    given = dict(params)
    p = dict(params)
    t = np.arange(1, T + 1, dtype=np.float64)

    if kind == "constant":
        lrs = np.full(T, peak_lr)
    elif kind == "cosine":
        a = float(p.pop("alpha_end", 0.1))
        if not 0 <= a <= 1:
            raise ValueError(f"alpha_end must lie in [0, 1], got {a}")
        lrs = 0.5 * (1 + a) * peak_lr + 0.5 * (1 - a) * peak_lr * np.cos(np.pi * t / T)
    elif kind in ("wsd", "wsdld", "wsd_cosine", "wsdsc"):
        ts = _decay_start(T, p)
        lrs = np.full(T, peak_lr)
        frac = (t[ts:] - ts) / (T - ts)
        if kind == "wsdsc":
            lrs[ts:] = peak_lr * (1 - frac) ** 1.5
        else:
            end = float(p.pop("end_lr", 0.1 * peak_lr))
            if not 0 < end <= peak_lr:
                raise ValueError(f"end_lr must lie in (0, peak_lr], got {end}")
            if kind == "wsd":
                lrs[ts:] = peak_lr * (end / peak_lr) ** frac
            elif kind == "wsdld":
                lrs[ts:] = peak_lr + (end - peak_lr) * frac
            else:
                lrs[ts:] = end + 0.5 * (peak_lr - end) * (1 + np.cos(np.pi * frac))
    elif kind == "two_stage":
        lr_b = float(p.pop("lr_b"))
        ta = int(p.pop("T_A"))
        if not 0 < lr_b <= peak_lr:
            raise ValueError(f"two-stage needs 0 < lr_b <= peak_lr, got {lr_b}")
        if not 0 <= ta <= T:
            raise ValueError(f"T_A must lie in [0, T], got {ta}")
        lrs = np.where(t <= ta, peak_lr, lr_b)
    elif kind == "multi_stage":
        spec = StageSpec(tuple(p.pop("boundaries")), tuple(p.pop("stage_lrs")))
        if spec.total_steps != T:
            raise ValueError(f"last boundary {spec.total_steps} != T={T}")
        if spec.stage_lrs[0] >= peak_lr:
            raise ValueError("first stage LR must be below the peak LR")
        lrs = np.full(T, peak_lr)
        for lo, hi, lr in zip(spec.boundaries, spec.boundaries[1:], spec.stage_lrs):
            lrs[lo:hi] = lr
    elif kind == "cyclic":
        lo = float(p.pop("lr_lo"))
        half = int(p.pop("half_cycle"))
        start = int(p.pop("first_decay", 0))
        if not 0 <= lo < peak_lr or half < 1 or start < 0:
            raise ValueError("cyclic needs 0 <= lr_lo < peak_lr, half_cycle >= 1, first_decay >= 0")
        phase = np.clip(t - start, 0, None) / half
        tri = np.abs(((phase + 1) % 2) - 1)  # 0 at cycle start, 1 at trough
        lrs = peak_lr - (peak_lr - lo) * tri
    elif kind == "random_polyline":
        lo = float(p.pop("lr_lo"))
        hi = float(p.pop("lr_hi"))
        interval = int(p.pop("interval"))
        seed = int(p.pop("seed"))
        if not 0 <= lo <= hi or interval < 1:
            raise ValueError("random_polyline needs 0 <= lr_lo <= lr_hi and interval >= 1")
        if not lo <= peak_lr <= hi:
            raise ValueError(f"peak_lr {peak_lr} outside milestone range [{lo}, {hi}]")
        rng = np.random.Generator(np.random.PCG64(seed))
        knots_t = np.arange(0, T + interval, interval)
        knots = rng.uniform(lo, hi, size=knots_t.size)
        knots[0] = peak_lr
        lrs = np.interp(t, knots_t, knots)
    elif kind == "explicit":
        lrs = np.asarray(p.pop("post_lrs"), dtype=np.float64)
        if lrs.size != T:
            raise ValueError(f"explicit schedule has {lrs.size} LRs, expected T={T}")
        given = {}
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")

    if p:
        raise ValueError(f"unexpected parameters for {kind}: {sorted(p)}")
    return Schedule(W, peak_lr, lrs, kind, given)


def _check_range(s: Schedule, k: int, t: int) -> None:
    if not (1 <= k <= t <= s.total_steps):
        raise IndexError(f"need 1 <= k <= t <= {s.total_steps}, got k={k}, t={t}")


def lr_prefix_sum(s: Schedule, k: int, t: int) -> float:
    """``S_k(t) = eta_k + ... + eta_t``."""
    _check_range(s, k, t)
    return float(s.cumulative[t] - s.cumulative[k - 1])


def equivalent_step(s: Schedule, k: int, t: int) -> float:
    """Step of the ``k``-th auxiliary process with the same LR sum as step ``t``.

    The ``k``-th auxiliary process follows ``s`` for ``k`` steps and then holds
    ``eta_k``; ``k = 0`` is the constant-peak process.
    """
    if k == 0:
        if not 1 <= t <= s.total_steps:
            raise IndexError(f"step {t} outside [1, {s.total_steps}]")
        return float(s.cumulative[t] / s.peak_lr)
    _check_range(s, k, t)
    eta_k = s.post_lrs[k - 1]
    if eta_k == 0:
        raise ValueError(f"equivalent step undefined: eta_{k} = 0")
    return k - 1 + float(s.cumulative[t] - s.cumulative[k - 1]) / eta_k


def lr_area_from_samples(steps, lrs, peak_lr: float) -> np.ndarray:
    """LR-sum surrogate at sampled steps from a polyline through the samples.

    The polyline starts at ``(0, peak_lr)``. On each segment ``(a, b]`` the sum
    ``eta_{a+1} + ... + eta_b`` is taken as if the LR were linear in the step,
    which is exact for schedules that are piecewise linear between samples.
    """
    steps = np.asarray(steps, dtype=np.int64)
    lrs = np.asarray(lrs, dtype=np.float64)
    if steps.ndim != 1 or steps.shape != lrs.shape or steps.size == 0:
        raise ValueError("steps and lrs must be equal-length 1-d sequences")
    if steps[0] < 1 or np.any(np.diff(steps) <= 0):
        raise ValueError("validation steps must be strictly increasing and >= 1")
    a = np.concatenate(([0], steps[:-1]))
    eta_a = np.concatenate(([peak_lr], lrs[:-1]))
    n = steps - a
    seg = 0.5 * ((n + 1) * lrs + (n - 1) * eta_a)
    return np.cumsum(seg)


def lr_area_at(s: Schedule, validation_steps) -> np.ndarray:
    """Polyline LR-sum surrogate using only the LRs at ``validation_steps``."""
    steps = np.asarray(validation_steps, dtype=np.int64)
    if steps.size and (steps[0] < 1 or steps[-1] > s.total_steps):
        raise IndexError(f"validation steps must lie in [1, {s.total_steps}]")
    if np.any(np.diff(steps) <= 0):
        raise ValueError("validation steps must be strictly increasing without duplicates")
    return lr_area_from_samples(steps, s.post_lrs[steps - 1], s.peak_lr)


def save_schedule(s: Schedule, path, include_lrs: bool | None = None) -> None:
    Path(path).write_text(json.dumps(s.to_dict(include_lrs), indent=1))


def load_schedule(path) -> Schedule:
    return Schedule.from_dict(json.loads(Path(path).read_text()))


def validation_grid(T: int, every: int) -> np.ndarray:
    """Steps ``every, 2*every, ...`` plus ``T`` itself."""
    steps = np.arange(every, T + 1, every)
    if steps.size == 0 or steps[-1] != T:
        steps = np.append(steps, T)
    return steps

