"""Noisy SGD on diagonal quadratics with power-law spectra.

The model: loss ``L(theta) = 1/2 sum_i lambda_i theta_i^2`` (``theta`` is the
offset from the optimum), gradients ``g_t ~ N(H theta_{t-1}, diag(Sigma))``
and updates ``theta_t = theta_{t-1} - eta_t g_t``. The expected loss obeys an
exact per-coordinate second-moment recursion, which this module uses as
ground truth for the closed-form estimates.

Schedules here have no warmup: ``eta_0`` is the LR the estimates are anchored
to (by default the schedule's peak) and steps ``1..T`` use ``post_lrs``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .schedules import Schedule
from .special import lower_incomplete_gamma

__all__ = [
    "QuadSpec",
    "SpectrumInstance",
    "sample_spectra",
    "exact_expected_loss",
    "sgd_monte_carlo",
    "m_estimate",
    "g_hat",
    "matched_power_c",
    "theory_curve",
    "auxiliary_schedule",
    "auxiliary_ld",
]


@dataclass(frozen=True)
class QuadSpec:
    d: int
    nu: float = 0.3
    Lambda: float = 1.0
    rho: float = 0.2
    r: float = 2.0
    kappa: float = 0.5
    D: float = 1.0
    eta0: float = 0.1
    mu: float = 1.0

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d}")
        if not 0 <= self.nu < 1:
            raise ValueError(f"nu must lie in [0, 1), got {self.nu}")
        if not self.rho < 1 - self.nu:
            raise ValueError(f"rho must be below 1 - nu = {1 - self.nu}, got {self.rho}")
        if not 0 <= self.kappa < 2 - self.nu:
            raise ValueError(f"kappa must lie in [0, 2 - nu), got {self.kappa}")
        if not (self.Lambda > 0 and self.r > 0 and self.D >= 0 and self.mu >= 0 and self.eta0 > 0):
            raise ValueError("Lambda, r, eta0 must be positive and D, mu nonnegative")

    # exponents and constants of the closed-form loss curve
    @property
    def alpha(self) -> float:
        return 2 - self.nu - self.kappa

    @property
    def beta(self) -> float:
        return 1 - self.nu - self.rho

    @property
    def C(self) -> float:
        return 2 / self.r

    @property
    def Z(self) -> float:
        """Normalizer of the eigenvalue density ``lambda^-nu`` on ``(0, Lambda]``."""
        return self.Lambda ** (1 - self.nu) / (1 - self.nu)

    @property
    def F(self) -> float:
        """Noise-profile normalizer making the mean noise variance equal ``mu``."""
        return self.Z * self.r**self.beta / lower_incomplete_gamma(self.beta, self.r * self.Lambda)

    def L0(self, eta0: float | None = None) -> float:
        return self.d / 4 * (self.eta0 if eta0 is None else eta0) * self.mu

    @property
    def A(self) -> float:
        return self.d * math.gamma(self.alpha) * self.D**2 / (2 ** (self.alpha + 1) * self.Z)

    @property
    def B(self) -> float:
        return self.d / 4 * self.mu

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SpectrumInstance:
    lambdas: np.ndarray
    sigmas: np.ndarray
    deltas: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=np.float64)
        sig = np.asarray(self.sigmas, dtype=np.float64)
        dl = np.asarray(self.deltas, dtype=np.float64)
        if not (lam.ndim == 1 and lam.shape == sig.shape == dl.shape and lam.size):
            raise ValueError("lambdas, sigmas and deltas must be equal-length 1-d arrays")
        if np.any(lam <= 0) or np.any(sig < 0):
            raise ValueError("eigenvalues must be positive and noise variances nonnegative")
        for a in (lam, sig, dl):
            a.flags.writeable = False
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "sigmas", sig)
        object.__setattr__(self, "deltas", dl)

    @property
    def d(self) -> int:
        return int(self.lambdas.size)

    def initial_loss(self) -> float:
        return 0.5 * float(self.lambdas @ self.deltas**2)

    def to_dict(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)] for k in ("lambdas", "sigmas", "deltas")}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SpectrumInstance":
        return cls(**json.loads(Path(path).read_text()))


def sample_spectra(spec: QuadSpec, seed: int, stratified: bool = False) -> SpectrumInstance:
    """Draw eigenvalues by inverse CDF; noise and offsets follow from them.

    With ``stratified`` the uniforms are one per equal-probability cell, which
    keeps spectral averages close to their integrals at moderate ``d``.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    if stratified:
        u = (np.arange(spec.d) + rng.uniform(size=spec.d)) / spec.d
    else:
        u = rng.uniform(size=spec.d)
    u = np.clip(u, np.finfo(float).tiny, 1.0)
    lam = spec.Lambda * u ** (1 / (1 - spec.nu))
    sig = spec.F * spec.mu * lam**-spec.rho * np.exp(-spec.r * lam)
    sign = np.where(rng.uniform(size=spec.d) < 0.5, -1.0, 1.0)
    deltas = sign * spec.D * lam ** (-spec.kappa / 2)
    return SpectrumInstance(lam, sig, deltas)


def _lrs(s: Schedule) -> np.ndarray:
    return np.asarray(s.post_lrs)


def exact_expected_loss(inst: SpectrumInstance, s: Schedule) -> np.ndarray:
    """Expected loss at steps ``0..T`` from the second-moment recursion."""
    lam, sig = inst.lambdas, inst.sigmas
    m = inst.deltas**2
    lrs = _lrs(s)
    out = np.empty(lrs.size + 1)
    out[0] = 0.5 * float(lam @ m)
    for t, eta in enumerate(lrs, start=1):
        m = (1 - eta * lam) ** 2 * m + eta * eta * sig
        out[t] = 0.5 * float(lam @ m)
    return out


def sgd_monte_carlo(inst: SpectrumInstance, s: Schedule, trials: int, seed: int,
                    chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error of the loss at steps ``0..T`` over independent runs.

    Trial ``i`` draws its noise from its own Philox stream, spawned from
    ``seed``, so results do not depend on ``chunk``.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    lam, sd = inst.lambdas, np.sqrt(inst.sigmas)
    lrs = _lrs(s)
    T, d = lrs.size, inst.d
    children = np.random.SeedSequence(seed).spawn(trials)
    # running mean and sum of squared deviations, merged chunk by chunk
    count = 0
    mean = np.zeros(T + 1)
    m2 = np.zeros(T + 1)
    for start in range(0, trials, chunk):
        kids = children[start:start + chunk]
        n = len(kids)
        noise = np.empty((n, T, d))
        for i, ss in enumerate(kids):
            noise[i] = np.random.Generator(np.random.Philox(ss)).standard_normal((T, d))
        theta = np.broadcast_to(inst.deltas, (n, d)).copy()
        losses = np.empty((n, T + 1))
        losses[:, 0] = 0.5 * (theta**2) @ lam
        for t in range(T):
            eta = lrs[t]
            theta -= eta * (lam * theta + sd * noise[:, t])
            losses[:, t + 1] = 0.5 * (theta**2) @ lam
        c_mean = losses.mean(0)
        c_m2 = ((losses - c_mean) ** 2).sum(0)
        diff = c_mean - mean
        total = count + n
        mean = mean + diff * (n / total)
        m2 = m2 + c_m2 + diff**2 * (count * n / total)
        count = total
    if trials > 1:
        stderr = np.sqrt(m2 / (trials - 1) / trials)
    else:
        stderr = np.full(T + 1, np.nan)
    return mean, stderr


def m_estimate(inst: SpectrumInstance, s: Schedule, eta0: float | None = None) -> tuple[float, float]:
    """Closed-form estimate of the final expected loss and its error bound.

    The bound is valid when every LR is at most ``1 / max(lambda)``.
    """
    eta0 = s.peak_lr if eta0 is None else eta0
    lam, sig, th2 = inst.lambdas, inst.sigmas, inst.deltas**2
    lrs = _lrs(s)
    S1 = float(np.sum(lrs))
    decay = np.exp(-2 * lam * S1)
    est = 0.5 * float(np.sum(th2 * lam * decay + eta0 * sig * (-np.expm1(-2 * lam * S1)) / 2))
    drops = -np.diff(np.concatenate(([eta0], lrs)))
    k = np.flatnonzero(drops != 0)
    if k.size:
        sk = np.cumsum(lrs[::-1])[::-1][k]  # S_k(T) for each drop
        reduction = 0.0
        for lo in range(0, k.size, 4096):
            blk = slice(lo, lo + 4096)
            inner = (-np.expm1(-2 * np.outer(sk[blk], lam))) @ sig / 2
            reduction += float(drops[k[blk]] @ inner)
        est -= 0.5 * reduction
    eta_max = max(eta0, float(lrs.max()))
    bound = 5 * eta_max * float(np.sum(lam**3 * S1 * decay * th2)) + 7.5 * eta_max**2 * float(sig @ lam)
    return est, bound


def g_hat(x, beta: float, r: float, Lambda: float, C: float | None = None):
    """Saturation function of the quadratic model, ``0`` at ``x = 0``."""
    C = 2 / r if C is None else C
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("argument must be nonnegative")
    ratio = lower_incomplete_gamma(beta, (2 * x + r) * Lambda) / lower_incomplete_gamma(beta, r * Lambda)
    out = 1 - ratio * np.exp(-beta * np.log1p(C * x))
    return float(out) if np.ndim(out) == 0 else out


def matched_power_c(beta: float, r: float, Lambda: float, C: float | None = None) -> float:
    """Scale for a pure power saturation with the same large-``x`` tail as :func:`g_hat`."""
    C = 2 / r if C is None else C
    return C * (math.gamma(beta) / lower_incomplete_gamma(beta, r * Lambda)) ** (-1 / beta)


def theory_curve(spec: QuadSpec, s: Schedule, eta0: float | None = None) -> np.ndarray:
    """Closed-form loss curve at steps ``1..T`` for the spectra described by ``spec``."""
    eta0 = s.peak_lr if eta0 is None else eta0
    lrs = _lrs(s)
    T = lrs.size
    S = np.cumsum(lrs)
    if np.any(S <= 0):
        raise ValueError("LR sum is zero at some step; the power term is undefined")
    curve = spec.L0(eta0) + spec.A * S ** -spec.alpha
    drops = -np.diff(np.concatenate(([eta0], lrs)))
    k = np.flatnonzero(drops != 0)  # zero-based index of step k
    if k.size:
        before = np.concatenate(([0.0], S))[k]  # S_1(k-1)
        ld = np.zeros(T)
        rows = max(1, (1 << 22) // T)
        t = np.arange(T)
        for lo in range(0, k.size, rows):
            kk = k[lo:lo + rows]
            sk = S[None, :] - before[lo:lo + rows, None]
            active = t[None, :] >= kk[:, None]
            x = np.where(active, sk, 0.0)
            ld += drops[kk] @ np.where(active, g_hat(x, spec.beta, spec.r, spec.Lambda, spec.C), 0.0)
        curve = curve - spec.B * ld
    return curve


def auxiliary_schedule(s: Schedule, k: int, length: int) -> Schedule:
    """Follow ``s`` for ``k`` steps, then hold ``eta_k`` (``k = 0`` holds the peak)."""
    lrs = _lrs(s)
    if not 0 <= k <= lrs.size:
        raise IndexError(f"auxiliary index {k} outside [0, {lrs.size}]")
    hold = s.peak_lr if k == 0 else lrs[k - 1]
    seq = np.concatenate((lrs[:k], np.full(max(length - k, 0), hold)))[:length]
    return Schedule(0, s.peak_lr, seq, "explicit")


def _loss_at(curve: np.ndarray, step: float) -> float:
    lo = int(math.floor(step))
    frac = step - lo
    if frac < 1e-9:
        return float(curve[lo])
    if frac > 1 - 1e-9:
        return float(curve[lo + 1])
    return float((1 - frac) * curve[lo] + frac * curve[lo + 1])


def auxiliary_ld(inst: SpectrumInstance, s: Schedule, k: int, t: int) -> float:
    """Intermediate loss reduction between auxiliary processes ``k`` and ``k+1`` at step ``t``.

    Compares the exact expected losses at the steps where each process has
    accumulated the same LR sum as ``s`` at step ``t``; fractional steps are
    linearly interpolated.
    """
    lrs = _lrs(s)
    if not 0 <= k < t <= lrs.size:
        raise IndexError(f"need 0 <= k < t <= {lrs.size}, got k={k}, t={t}")
    S = np.concatenate(([0.0], np.cumsum(lrs)))

    def step_and_curve(j):
        hold = s.peak_lr if j == 0 else lrs[j - 1]
        if hold == 0:
            raise ValueError(f"auxiliary process {j} continues at zero LR; equal-sum step undefined")
        step = j + (S[t] - S[j]) / hold
        n = max(int(math.ceil(step - 1e-9)), j, 1)
        curve = exact_expected_loss(inst, auxiliary_schedule(s, j, n))
        return _loss_at(curve, step)

    return step_and_curve(k) - step_and_curve(k + 1)
