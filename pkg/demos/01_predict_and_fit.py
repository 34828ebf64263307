"""Predict loss curves from LR schedules, then recover the law from synthetic curves.

Run with ``python3 demos/01_predict_and_fit.py`` (about 10 s).
"""

import numpy as np

from multipower import FitConfig, evaluate_metrics, fit_law, make_schedule, predict
from multipower.presets import PEAK_LR, REFERENCE_400M, WARMUP_STEPS, synthetic_dataset, test_schedules, training_schedules

# %% The same final LR area can give very different final losses.
# A constant run never cashes in the loss drop that annealing buys; cosine and
# WSD both do, and WSD keeps more LR area by decaying late.
T = 24_000
for kind, extra in [("constant", {}), ("cosine", {}), ("wsd", {"decay_steps": 4000, "end_lr": 0.1 * PEAK_LR}),
                    ("wsdld", {"decay_steps": 4000, "end_lr": 0.1 * PEAK_LR})]:
    s = make_schedule(kind, WARMUP_STEPS, T, PEAK_LR, **extra)
    loss = predict("MPL", REFERENCE_400M, s, [6000, 12000, 20000, T])
    print(f"{kind:9s} LR area {s.cumulative[-1]:.3f}  loss @6k/12k/20k/24k: " + " ".join(f"{x:.4f}" for x in loss))

# %% Compare the law against the plain power law in LR area (no annealing term).
cos = make_schedule("cosine", WARMUP_STEPS, T, PEAK_LR)
steps = np.array([4000, 8000, 16000, 24000])
gap = predict("OPL", REFERENCE_400M, cos, steps) - predict("MPL", REFERENCE_400M, cos, steps)
print("annealing bonus along cosine:", " ".join(f"{g:.4f}" for g in gap))

# %% Fit on three training runs, evaluate on two unseen schedules.
# The budget here is small for speed; the acceptance suite uses 10k steps per phase.
train = synthetic_dataset(REFERENCE_400M, training_schedules(), every=200)
report = fit_law("MPL", train, FitConfig(steps_per_phase=3000, phases=3, anneal_to=0.01))
print("fitted:", {k: round(v, 4) for k, v in report.params.to_dict().items()})
for s in test_schedules():
    held = np.arange(1, T + 1, 50)
    m = evaluate_metrics(predict("MPL", report.params, s, held), predict("MPL", REFERENCE_400M, s, held))
    print(f"held-out {s.kind}: R2 {m.r2:.6f}  WorstE {m.worste:.2e}")
