"""Search for the LR schedule with the lowest predicted final loss.

Run with ``python3 demos/02_optimize_schedule.py`` (about 30 s).
"""

from multipower import OptConfig, detect_phases, make_schedule, optimize_schedule
from multipower.laws import LawVariant, MplParams
from multipower.optimize import WSD_DECAY_GRID, predicted_final_loss
from multipower.presets import PEAK_LR, REFERENCE_400M, WARMUP_STEPS

T = 24_000
# %% Optimize under the main law. A short budget already lands close to the optimum.
cfg = OptConfig(T=T, eta0=PEAK_LR, warmup_steps=WARMUP_STEPS, iters=3000, step_sizes=(1e-6, 1e-7))
res = optimize_schedule("MPL", REFERENCE_400M, cfg)
phases = detect_phases(res.schedule)
print(f"optimized final loss {res.final_loss:.5f} (best step size {res.step_size:g})")
print(f"stable for {phases.T_stable} steps, decay exponent {phases.decay_exponent:.2f}, "
      f"ends at {phases.final_lr_ratio:.3f} x peak")

# %% Baselines: cosine and WSD/WSDLD over a grid of decay lengths.
cos = predicted_final_loss("MPL", REFERENCE_400M, make_schedule("cosine", WARMUP_STEPS, T, PEAK_LR))
print(f"cosine {cos:.5f}  margin {cos - res.final_loss:.4f}")
for kind in ("wsd", "wsdld"):
    best = min((predicted_final_loss("MPL", REFERENCE_400M,
                                     make_schedule(kind, WARMUP_STEPS, T, PEAK_LR, decay_steps=d, end_lr=0.1 * PEAK_LR)), d)
               for d in WSD_DECAY_GRID)
    print(f"best {kind}: {best[0]:.5f} with {best[1]} decay steps")

# %% The momentum-style law has an exponential saturation in step count, and its
# optimum degenerates: hold the peak, then drop straight to (almost) zero.
p = MplParams(L0=2.5, A=0.65, B=0.57, C=1.0, alpha=0.43, beta=0.5, gamma=0.0)
mtl = optimize_schedule(LawVariant("MTL", 0.999), p, OptConfig(T=T, iters=2000))
lrs = mtl.schedule.post_lrs
inside = int(((lrs > 1e-10) & (lrs < PEAK_LR - 1e-8)).sum())
print(f"momentum law: peak held for {(lrs >= PEAK_LR - 1e-8).sum()} steps, {inside} intermediate steps")
