"""Hartree atomic units and conversions used throughout peierlsmd.

All internal quantities are in Hartree atomic units (hbar = m_e = e = 1).
Lengths are in bohr, energies in hartree, times in hbar/hartree and
masses in electron masses. Conversions come from ``scipy.constants`` so
that they track CODATA.
"""
from scipy import constants

HBAR = 1.0
ELECTRON_MASS = 1.0
ELEMENTARY_CHARGE = 1.0
# electron charge, q = -e
Q_ELECTRON = -ELEMENTARY_CHARGE
SPEED_OF_LIGHT = 1.0 / constants.fine_structure

FS_PER_AU_TIME = constants.physical_constants["atomic unit of time"][0] * 1e15
AS_PER_AU_TIME = FS_PER_AU_TIME * 1e3
EV_PER_HARTREE = constants.physical_constants["Hartree energy in eV"][0]
ANGSTROM_PER_BOHR = constants.physical_constants["Bohr radius"][0] * 1e10
ELECTRON_MASS_PER_AMU = 1.0 / constants.physical_constants["electron mass in u"][0]
BOLTZMANN_HARTREE_PER_K = constants.physical_constants["kelvin-hartree relationship"][0]
_FIELD_AU_V_PER_M = constants.physical_constants["atomic unit of electric field"][0]


def fs_to_au(t_fs: float) -> float:
    """Convert femtoseconds to atomic time units."""
    return t_fs / FS_PER_AU_TIME


def as_to_au(t_as: float) -> float:
    """Convert attoseconds to atomic time units."""
    return t_as / AS_PER_AU_TIME


def au_to_fs(t_au: float) -> float:
    """Convert atomic time units to femtoseconds."""
    return t_au * FS_PER_AU_TIME


def ev_to_hartree(energy_ev: float) -> float:
    """Convert electron volts to hartree."""
    return energy_ev / EV_PER_HARTREE


def angstrom_to_bohr(length: float) -> float:
    """Convert angstrom to bohr."""
    return length / ANGSTROM_PER_BOHR


def amu_to_au(mass: float) -> float:
    """Convert unified atomic mass units to electron masses."""
    return mass * ELECTRON_MASS_PER_AMU


def intensity_to_field(intensity_wcm2: float) -> float:
    """Peak electric field (a.u.) of a linearly polarized wave.

    E0 = sqrt(2 I / (epsilon_0 c)) in SI, then divided by the atomic unit
    of electric field. The intensity is given in W/cm^2.
    """
    intensity_si = intensity_wcm2 * 1e4
    field_si = (2.0 * intensity_si / (constants.epsilon_0 * constants.c)) ** 0.5
    return field_si / _FIELD_AU_V_PER_M


def intensity_to_amplitude(intensity_wcm2: float, omega: float) -> float:
    """Vector-potential amplitude A0 = (c / omega) E0 in atomic units."""
    if omega <= 0.0:
        raise ValueError("intensity can only be converted for omega > 0")
    return SPEED_OF_LIGHT / omega * intensity_to_field(intensity_wcm2)
