"""Simulator and analysis toolkit for phase-coherent fiber links with laser drift correction."""

from .analysis import (AdevCurve, AllanDeviation, DriftRegressor, PsdCurve, StabilityReport, WelchPSD,
                       fit_drift, fit_sigma0, integrated_phase_noise, overlapping_adev, suppression_db,
                       welch_psd)
from .dsp import DspConfig, adc_fold, nco_frequency, synth_aom_drive
from .noise import DriftSpec, NoiseSpec, TempProfile, drift_waveform, synth_power_law, synth_temperature
from .plant import (AomActuator, CounterModel, DfcReference, FiberLink, LaserModel, PlantConfig,
                    PlantState, beat_inloop, beat_outofloop, counter_read, plant_tick)
from .qkd import QkdBudget, qber_budget, qber_fiber, qber_intrinsic
from .servo import RunResult, ServoConfig, TelemetryConfig, loop_gain_probe, run_scenario
from .trace import Trace

__version__ = "0.1.0"
