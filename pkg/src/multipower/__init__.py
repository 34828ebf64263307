"""Loss-curve prediction from learning-rate schedules, law fitting, schedule
optimization, and a noisy-quadratic testbed for the underlying theory."""

from .fitting import FitConfig, FitReport, Metrics, evaluate_metrics, fit_law, fit_objective
from .laws import LawVariant, LossCurve, MplParams, predict, predict_gradient
from .optimize import OptConfig, OptResult, PhaseReport, detect_phases, optimize_schedule
from .presets import REFERENCE_400M
from .quadratic import (QuadSpec, SpectrumInstance, exact_expected_loss, m_estimate, sample_spectra,
                        sgd_monte_carlo, theory_curve)
from .schedules import Schedule, StageSpec, make_schedule
from .special import lower_incomplete_gamma

__version__ = "0.1.0"
