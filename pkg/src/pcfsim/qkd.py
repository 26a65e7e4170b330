"""TF-QKD error budget: fiber-induced and phase-slicing QBER.

The fiber contribution follows ``E_F = sin^2(dphi / 2)``; the intrinsic
contribution of encoding into ``M`` phase slices is
``E_M = (1 - sinc(2 pi / M)) / 2`` with ``sinc(x) = sin(x) / x``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ._validation import ConfigError, DomainError
from .trace import Trace

FIG7_SLICES = (16, 32, 64)


@dataclass(frozen=True)
class QkdBudget:
    M: int
    delta_phi: float  # degrees
    E_F: float
    E_M: float
    integration_time: float | None = None

    @property
    def total(self) -> float:
        return self.E_M + self.E_F

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        d["units"] = {"delta_phi": "deg", "E_F": "1", "E_M": "1", "integration_time": "s"}
        return d


def qber_fiber(delta_phi: float) -> float:
    """QBER from a differential phase error ``delta_phi`` in degrees, [0, 180)."""
    delta_phi = float(delta_phi)
    if not 0.0 <= delta_phi < 180.0:
        raise DomainError(f"delta_phi must lie in [0, 180) degrees, got {delta_phi}")
    return math.sin(math.radians(delta_phi) / 2.0) ** 2


def qber_intrinsic(M: int) -> float:
    """QBER from slicing the encoding phase into ``M`` parts (M >= 2)."""
    if isinstance(M, bool) or int(M) != M or M < 2:
        raise DomainError(f"M must be an integer >= 2, got {M!r}")
    x = 2.0 * math.pi / int(M)
    if x < 1e-4:
        # sin(x)/x = 1 - x^2/6 + x^4/120 loses everything to cancellation here
        return x * x / 12.0 - x**4 / 240.0
    return 0.5 * (1.0 - math.sin(x) / x)


def qber_budget(M: int, delta_phi: float, integration_time: float | None = None) -> QkdBudget:
    return QkdBudget(int(M), float(delta_phi), qber_fiber(delta_phi), qber_intrinsic(M), integration_time)


def fig7_curve(max_deg: float = 10.0, points: int = 201, slices=FIG7_SLICES) -> dict[str, np.ndarray]:
    """E_F over [0, max_deg] degrees plus the E_M horizontals for ``slices``."""
    dphi = np.linspace(0.0, max_deg, points)
    curve = {"delta_phi_deg": dphi, "E_F": np.sin(np.radians(dphi) / 2.0) ** 2}
    for m in slices:
        curve[f"E_M_{m}"] = np.full(points, qber_intrinsic(m))
    return curve


def delta_phi_from_links(phase_a: Trace, phase_b: Trace, integration_time: float) -> float:
    """Differential phase error [deg] between two link phase traces [rad].

    The differential phase is block-averaged over ``integration_time``,
    its mean removed, and the RMS of the block means returned.  A static
    offset between the links therefore contributes nothing.
    """
    a = np.asarray(phase_a.values, dtype=float)
    b = np.asarray(phase_b.values, dtype=float)
    if a.size != b.size or not math.isclose(phase_a.fs, phase_b.fs, rel_tol=1e-12) \
            or not math.isclose(phase_a.t0, phase_b.t0, abs_tol=0.5 / phase_a.fs):
        raise ConfigError("phase traces must share length, sample rate and start time", "phase_b")
    k = int(round(float(integration_time) * phase_a.fs))
    if k < 1:
        raise ConfigError("integration time is shorter than one sample", "integration_time")
    nblocks = a.size // k
    if nblocks < 1:
        raise ConfigError("integration time exceeds the trace length", "integration_time")
    diff = (a - b)[: nblocks * k].reshape(nblocks, k).mean(axis=1)
    diff -= diff.mean()
    return math.degrees(math.sqrt(np.mean(diff * diff)))
