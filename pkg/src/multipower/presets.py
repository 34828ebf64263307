"""Reference parameters and the standard synthetic train/test schedules."""

from __future__ import annotations

from .laws import LawVariant, LossCurve, MplParams, predict
from .schedules import Schedule, make_schedule, validation_grid

__all__ = [
    "REFERENCE_400M",
    "PRESET_PARAMS",
    "WARMUP_STEPS",
    "PEAK_LR",
    "END_LR",
    "training_schedules",
    "test_schedules",
    "synthetic_dataset",
]

# Published fit for a 400M-parameter model (peak LR 3e-4, warmup 2160).
REFERENCE_400M = MplParams(L0=2.52, A=0.66, B=614.30, C=0.16, alpha=0.42, beta=0.88, gamma=0.56)
PRESET_PARAMS = {"reference-400m": REFERENCE_400M}

WARMUP_STEPS = 2160
PEAK_LR = 3e-4
END_LR = 3e-5


def training_schedules(peak_lr: float = PEAK_LR, W: int = WARMUP_STEPS) -> list[Schedule]:
    """Constant 24k, cosine 24k and a 16k two-stage run dropping to 0.3x at step 8000."""
    return [
        make_schedule("constant", W, 24_000, peak_lr),
        make_schedule("cosine", W, 24_000, peak_lr),
        make_schedule("two_stage", W, 16_000, peak_lr, lr_b=0.3 * peak_lr, T_A=8000),
    ]


def test_schedules(peak_lr: float = PEAK_LR, W: int = WARMUP_STEPS, decay_steps: int = 4000) -> list[Schedule]:
    """24k WSD (exponential decay) and WSDLD (linear decay), both ending at 0.1x peak."""
    end = 0.1 * peak_lr
    return [
        make_schedule("wsd", W, 24_000, peak_lr, decay_steps=decay_steps, end_lr=end),
        make_schedule("wsdld", W, 24_000, peak_lr, decay_steps=decay_steps, end_lr=end),
    ]


def synthetic_dataset(params: MplParams, schedules: list[Schedule], every: int = 100,
                      variant: LawVariant | str = "MPL") -> list[tuple[Schedule, LossCurve]]:
    """Noiseless curves sampled every ``every`` steps (plus the final step)."""
    out = []
    for s in schedules:
        steps = validation_grid(s.total_steps, every)
        out.append((s, LossCurve(steps, predict(variant, params, s, steps))))
    return out
