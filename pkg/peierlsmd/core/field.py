"""Applied vector potential in the long-wavelength limit.

The bond-averaged vector potential carries no site dependence here, so
``a_bar`` and ``e_bar`` are functions of time only:

    A(t) = A0 env(t) cos(omega (t - t0) + phase) e + delta_a
    E(t) = -(1/c) dA/dt
"""
import logging
import warnings
from typing import Callable, ClassVar, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from peierlsmd.units import (
    SPEED_OF_LIGHT,
    ev_to_hartree,
    fs_to_au,
    intensity_to_amplitude,
)

logger = logging.getLogger(__name__)

# envelope values below this fraction of the peak are clipped to zero
ENVELOPE_FLOOR = 1e-12
# wavelength must exceed this multiple of the largest inter-atomic distance
WAVELENGTH_GUARD = 100.0


class LongWavelengthWarning(UserWarning):
    """The pulse wavelength is not long compared with the system size."""


def _gaussian(t: float, tau: float) -> tuple[float, float]:
    # tau is the intensity FWHM: env^2 has half maximum at |t| = tau / 2
    rate = 2.0 * np.log(2.0) / tau ** 2
    env = np.exp(-rate * t * t)
    if env < ENVELOPE_FLOOR:
        return 0.0, 0.0
    return env, -2.0 * rate * t * env


def _sin2(t: float, tau: float) -> tuple[float, float]:
    if abs(t) >= 0.5 * tau:
        return 0.0, 0.0
    arg = np.pi * t / tau
    return np.cos(arg) ** 2, -np.pi / tau * np.sin(2.0 * arg)


def _constant(t: float, tau: float) -> tuple[float, float]:
    return 1.0, 0.0


def _gaussian_half_width(tau: float) -> float:
    return tau * np.sqrt(np.log(1.0 / ENVELOPE_FLOOR) / (2.0 * np.log(2.0)))


class PulseSpec(BaseModel):
    """Parametrized vector potential; all quantities in atomic units.

    Attributes:
        amplitude: Peak vector-potential amplitude A0
        omega: Carrier angular frequency
        envelope: 'gaussian', 'sin2' or 'constant'
        tau: Envelope duration (intensity FWHM for gaussian, full support for sin2)
        phase: Carrier-envelope phase
        polarization: Unit polarization vector
        t0: Envelope centre
        delta_a: Constant gauge offset added to A
    """
    model_config = ConfigDict(frozen=True)

    # envelope kind -> f(t - t0, tau) returning (env, d env / dt)
    ENVELOPES: ClassVar[dict[str, Callable[[float, float], tuple[float, float]]]] = {
        "gaussian": _gaussian,
        "sin2": _sin2,
        "constant": _constant,
    }

    amplitude: float
    omega: float
    envelope: str = "sin2"
    tau: float = 1.0
    phase: float = 0.0
    polarization: tuple[float, float, float] = (0.0, 0.0, 1.0)
    t0: float = 0.0
    delta_a: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @field_validator("envelope")
    @classmethod
    def known_envelope(cls, value: str) -> str:
        if value not in cls.ENVELOPES:
            available = ", ".join(cls.ENVELOPES)
            raise ValueError(f"Unsupported envelope: '{value}'. Available envelopes: {available}")
        return value

    @field_validator("tau")
    @classmethod
    def positive_tau(cls, value: float) -> float:
        if not value > 0.0:
            raise ValueError("envelope duration must be positive")
        return value

    @field_validator("polarization")
    @classmethod
    def unit_polarization(cls, value):
        norm = float(np.linalg.norm(value))
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"polarization must be a unit vector, |e| = {norm}")
        return tuple(float(v) for v in value)

    @classmethod
    def from_config(cls, block) -> "PulseSpec":
        """Build a pulse from a validated ``[pulse]`` config block."""
        omega = block.omega_au if block.omega_au is not None else ev_to_hartree(block.omega_ev)
        amplitude = block.amplitude
        if amplitude is None:
            amplitude = intensity_to_amplitude(block.intensity_wcm2, omega)
        return cls(
            amplitude=amplitude,
            omega=omega,
            envelope=block.envelope,
            tau=fs_to_au(block.tau_fs),
            phase=block.phase,
            polarization=block.polarization,
            t0=fs_to_au(block.t0_fs),
            delta_a=block.delta_a,
        )

    def support(self) -> tuple[float, float]:
        """Interval outside which the envelope vanishes (infinite for constant)."""
        if self.envelope == "sin2":
            half = 0.5 * self.tau
        elif self.envelope == "gaussian":
            half = _gaussian_half_width(self.tau)
        else:
            half = np.inf
        return self.t0 - half, self.t0 + half

    @property
    def end_time(self) -> Optional[float]:
        end = self.support()[1]
        return None if np.isinf(end) else float(end)

    @property
    def wavelength(self) -> float:
        return 2.0 * np.pi * SPEED_OF_LIGHT / self.omega if self.omega > 0.0 else np.inf

    def envelope_at(self, t: float) -> tuple[float, float]:
        return self.ENVELOPES[self.envelope](t - self.t0, self.tau)


def a_bar(pulse: PulseSpec, t: float) -> np.ndarray:
    """Bond-averaged vector potential at time t."""
    if not np.isfinite(t):
        raise ValueError("time must be finite")
    env, _ = pulse.envelope_at(t)
    carrier = np.cos(pulse.omega * (t - pulse.t0) + pulse.phase)
    return pulse.amplitude * env * carrier * np.asarray(pulse.polarization) + np.asarray(pulse.delta_a)


def e_bar(pulse: PulseSpec, t: float) -> np.ndarray:
    """Electric field -(1/c) dA/dt, by the product rule on envelope and carrier."""
    if not np.isfinite(t):
        raise ValueError("time must be finite")
    env, denv = pulse.envelope_at(t)
    arg = pulse.omega * (t - pulse.t0) + pulse.phase
    dadt = pulse.amplitude * (denv * np.cos(arg) - env * pulse.omega * np.sin(arg))
    return -dadt / SPEED_OF_LIGHT * np.asarray(pulse.polarization)


def check_wavelength(pulse: PulseSpec, positions: np.ndarray) -> bool:
    """Warn when the wavelength is not long compared with the system size.

    Returns:
        True when the long-wavelength condition holds
    """
    positions = np.asarray(positions, dtype=float)
    if len(positions) < 2:
        return True
    span = float(np.max(np.linalg.norm(positions[:, None] - positions[None, :], axis=-1)))
    if pulse.wavelength > WAVELENGTH_GUARD * span:
        return True
    message = (f"pulse wavelength {pulse.wavelength:.4g} bohr is not long compared "
               f"with the largest inter-atomic distance {span:.4g} bohr")
    logger.warning("%s", message)
    warnings.warn(message, LongWavelengthWarning, stacklevel=2)
    return False
