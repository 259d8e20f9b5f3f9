"""Independent reference values for checking the main computation.

Nothing here touches the matrix assembly path: integrals are done by
adaptive quadrature, dynamics by closed forms, derivatives by finite
differences.
"""
import logging
import warnings
from typing import Callable, Sequence

import numpy as np
from pydantic import BaseModel, field_validator, model_validator
from scipy import integrate
from scipy.optimize import brentq

from peierlsmd.errors import NumericalError
from peierlsmd.model.orbitals import OrbitalSpec
from peierlsmd.units import ELECTRON_MASS, ELEMENTARY_CHARGE, HBAR, Q_ELECTRON, SPEED_OF_LIGHT

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-10
STENCIL_STEP = 1e-3
# exp(-40) keeps the truncated tails far below the default tolerance
BOX_DECAY = 40.0
ELEMENT_KINDS = ("overlap", "dipole", "momentum")


class OracleResult(BaseModel):
    """Reference value(s) with an error estimate for each.

    ``imaginary`` holds imaginary parts when the quantity is complex.
    ``abscissa`` holds the times or sweep parameters of a series.
    """
    values: list[float]
    errors: list[float]
    method: str
    imaginary: list[float] = []
    abscissa: list[float] = []
    labels: list[str] = []

    @field_validator("errors")
    @classmethod
    def non_negative(cls, value: list[float]) -> list[float]:
        if any(e < 0.0 or not np.isfinite(e) for e in value):
            raise ValueError("error estimates must be finite and non-negative")
        return value

    @model_validator(mode="after")
    def one_error_per_value(self) -> "OracleResult":
        if len(self.errors) != len(self.values):
            raise ValueError("one error estimate per value is required")
        if self.imaginary and len(self.imaginary) != len(self.values):
            raise ValueError("imaginary parts must match the values")
        return self

    @property
    def array(self) -> np.ndarray:
        real = np.asarray(self.values, dtype=float)
        if not self.imaginary:
            return real
        return real + 1j * np.asarray(self.imaginary, dtype=float)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0


def _ket_factor(power: int, exponent: float, x: np.ndarray) -> np.ndarray:
    return x ** power * np.exp(-exponent * x * x)


def _quad(function: Callable[[float], float], lower: float, upper: float,
          points: Sequence[float], tolerance: float) -> tuple[float, float]:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", integrate.IntegrationWarning)
        value, error = integrate.quad(function, lower, upper, points=points,
                                      epsabs=tolerance, epsrel=0.0, limit=400)
    failures = [w for w in caught if issubclass(w.category, integrate.IntegrationWarning)]
    if failures or error > 10.0 * tolerance:
        reason = failures[0].message if failures else "error above tolerance"
        raise NumericalError(f"quadrature did not converge (estimate {value:.3e} "
                             f"+- {error:.1e}): {reason}", condition=error)
    return value, error


def _axis_integral(bra_power: int, ket_power: int, a: float, b: float, shift: float,
                   operator: str, tolerance: float) -> tuple[float, float]:
    """One Cartesian factor with the ket at the origin and the bra at ``shift``."""
    half = np.sqrt(BOX_DECAY / min(a, b))
    lower, upper = min(0.0, shift) - half, max(0.0, shift) + half

    def bra(x: float) -> float:
        return (x - shift) ** bra_power * np.exp(-a * (x - shift) ** 2)

    if operator == "plain":
        def ket(x: float) -> float:
            return float(_ket_factor(ket_power, b, np.asarray(x)))
    elif operator == "position":
        def ket(x: float) -> float:
            return x * float(_ket_factor(ket_power, b, np.asarray(x)))
    else:
        # five-point central stencil for d/dx applied to the ket
        h = STENCIL_STEP

        def ket(x: float) -> float:
            samples = _ket_factor(ket_power, b, x + h * np.array([-2.0, -1.0, 1.0, 2.0]))
            return float((samples[0] - 8.0 * samples[1] + 8.0 * samples[2] - samples[3]) / (12.0 * h))

    return _quad(lambda x: bra(x) * ket(x), lower, upper, sorted({0.0, shift}), tolerance)


def quadrature_matrix_element(kind: str, bra: OrbitalSpec, ket: OrbitalSpec,
                              d: Sequence[float],
                              tolerance: float = DEFAULT_TOLERANCE) -> OracleResult:
    """Overlap, dipole or momentum element of two orbitals by quadrature.

    The integrand of every Cartesian Gaussian pair separates into three
    one-dimensional factors, each integrated adaptively over a box beyond
    which both Gaussians have decayed by exp(-40).

    Args:
        kind: ``overlap``, ``dipole`` (moment about the ket centre, times q)
            or ``momentum`` (-i hbar grad on the ket)
        bra, ket: Orbitals
        d: Bra centre minus ket centre
        tolerance: Absolute tolerance per one-dimensional factor

    Raises:
        ValueError: For an unknown kind
        NumericalError: If a quadrature does not converge
    """
    if kind not in ELEMENT_KINDS:
        raise ValueError(f"Unsupported element kind: '{kind}'. "
                         f"Available kinds: {', '.join(ELEMENT_KINDS)}")
    d = np.asarray(d, dtype=float)
    if d.shape != (3,) or not np.all(np.isfinite(d)):
        raise ValueError("displacement must be a finite 3-vector")
    norm = bra.norm * ket.norm
    plain = [_axis_integral(bra.powers[k], ket.powers[k], bra.alpha, ket.alpha, d[k],
                            "plain", tolerance) for k in range(3)]

    def product(replaced: int, factor: tuple[float, float]) -> tuple[float, float]:
        parts = [factor if k == replaced else plain[k] for k in range(3)]
        value = float(np.prod([p[0] for p in parts]))
        error = sum(parts[k][1] * np.prod([abs(parts[j][0]) for j in range(3) if j != k])
                    for k in range(3))
        return value, float(error)

    if kind == "overlap":
        value, error = product(0, plain[0])
        return OracleResult(values=[norm * value], errors=[norm * error],
                            method="separable adaptive quadrature", labels=["S0"])

    operator = "position" if kind == "dipole" else "derivative"
    components = [product(k, _axis_integral(bra.powers[k], ket.powers[k], bra.alpha,
                                            ket.alpha, d[k], operator, tolerance))
                  for k in range(3)]
    values = np.array([c[0] for c in components]) * norm
    errors = np.array([c[1] for c in components]) * norm
    if kind == "dipole":
        return OracleResult(values=(Q_ELECTRON * values).tolist(),
                            errors=(abs(Q_ELECTRON) * errors).tolist(),
                            method="separable adaptive quadrature",
                            labels=["mu_x", "mu_y", "mu_z"])
    # -i hbar <bra|d/dx|ket>: purely imaginary for real orbitals
    stencil = STENCIL_STEP ** 4 * 10.0 * norm
    return OracleResult(values=[0.0, 0.0, 0.0], imaginary=(-HBAR * values).tolist(),
                        errors=(HBAR * errors + stencil).tolist(),
                        method="separable adaptive quadrature, five-point ket stencil",
                        labels=["p_x", "p_y", "p_z"])


# ---------------------------------------------------------------- dynamics

def rabi_population(times: Sequence[float], rabi_frequency: float,
                    detuning: float = 0.0) -> OracleResult:
    """Upper-level population of a driven two-level system in the rotating frame."""
    times = np.asarray(times, dtype=float)
    effective = np.hypot(rabi_frequency, detuning)
    values = (rabi_frequency / effective) ** 2 * np.sin(0.5 * effective * times / HBAR) ** 2
    return OracleResult(values=values.tolist(), errors=[0.0] * len(values),
                        method="closed form, rotating-wave two-level", abscissa=times.tolist())


def landau_zener_probability(coupling: float, sweep_rates: Sequence[float]) -> OracleResult:
    """Diabatic passage probability exp(-2 pi |H12|^2 / (hbar |d(E1 - E2)/dt|)).

    Args:
        coupling: Off-diagonal diabatic element H12 (half the minimum gap)
        sweep_rates: Rates of change of the diabatic energy difference
    """
    rates = np.abs(np.asarray(sweep_rates, dtype=float))
    values = np.exp(-2.0 * np.pi * coupling ** 2 / (HBAR * rates))
    return OracleResult(values=values.tolist(), errors=[0.0] * len(values),
                        method="closed form, Landau-Zener", abscissa=rates.tolist())


def free_phase(times: Sequence[float], energy: float) -> OracleResult:
    """exp(-i E t / hbar) of a stationary state."""
    times = np.asarray(times, dtype=float)
    phase = np.exp(-1j * energy * times / HBAR)
    return OracleResult(values=phase.real.tolist(), imaginary=phase.imag.tolist(),
                        errors=[0.0] * len(times), method="closed form, stationary phase",
                        abscissa=times.tolist())


REFERENCE_FIXTURES = ("rabi", "landau_zener", "free_phase")


def reference_dynamics(fixture: str, **params) -> OracleResult:
    """Closed-form series of a named fixture.

    Examples:
        >>> reference_dynamics("rabi", times=[0.0], rabi_frequency=0.01).values
        [0.0]
    """
    if fixture == "rabi":
        return rabi_population(params["times"], params["rabi_frequency"],
                               params.get("detuning", 0.0))
    if fixture == "landau_zener":
        return landau_zener_probability(params["coupling"], params["sweep_rates"])
    if fixture == "free_phase":
        return free_phase(params["times"], params["energy"])
    raise ValueError(f"Unsupported fixture: '{fixture}'. "
                     f"Available fixtures: {', '.join(REFERENCE_FIXTURES)}")


# ------------------------------------------------------------------ statics

def generalized_eigen_2x2(h11: float, h22: float, h12: float, s12: float) -> OracleResult:
    """Roots of det(H - E S) = 0 for a real symmetric pair with unit diagonal overlap."""
    a = 1.0 - s12 ** 2
    b = -(h11 + h22 - 2.0 * h12 * s12)
    c = h11 * h22 - h12 ** 2
    root = np.sqrt(b * b - 4.0 * a * c)
    roots = sorted([(-b - root) / (2.0 * a), (-b + root) / (2.0 * a)])
    error = 4.0 * np.finfo(float).eps * max(abs(r) for r in roots)
    return OracleResult(values=[float(r) for r in roots], errors=[error, error],
                        method="closed form, 2x2 generalized eigenproblem",
                        labels=["E-", "E+"])


def fd_gradient(function: Callable[[np.ndarray], float], x: np.ndarray,
                delta: float = 1e-4) -> np.ndarray:
    """Fourth-order central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    gradient = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        shifted = []
        for step in (-2.0, -1.0, 1.0, 2.0):
            shifted_x = x.copy()
            shifted_x[index] += step * delta
            shifted.append(function(shifted_x))
        gradient[index] = (shifted[0] - 8.0 * shifted[1] + 8.0 * shifted[2] - shifted[3]) / (12.0 * delta)
    return gradient


def fd_coupling(solve: Callable[[float], tuple[np.ndarray, np.ndarray, np.ndarray]],
                x: float, i: int, j: int, delta: float = 1e-4) -> OracleResult:
    """Derivative coupling c_i(x)^+ S(x) dc_j/dx by central differences.

    Args:
        solve: x -> (energies, vectors, overlap) at a scalar coordinate
        x: Coordinate value
        i, j: Adiabatic indices
        delta: Finite-difference step
    """
    _, vectors, overlap = solve(x)
    reference = vectors[:, j]
    neighbours = []
    for shifted in (x + delta, x - delta):
        _, other, s_other = solve(shifted)
        column = other[:, j]
        # align the arbitrary eigenvector sign with the reference
        if np.real(reference.conj() @ s_other @ column) < 0.0:
            column = -column
        neighbours.append(column)
    derivative = (neighbours[0] - neighbours[1]) / (2.0 * delta)
    value = complex(vectors[:, i].conj() @ overlap @ derivative)
    return OracleResult(values=[value.real], errors=[delta ** 2], imaginary=[value.imag],
                        method="central finite difference of eigenvectors")


def equilibrium_bond_length(energy: Callable[[float], float],
                            bracket: tuple[float, float], delta: float = 1e-4) -> OracleResult:
    """Bond length where dE/dr = 0, by Brent's method on a finite-difference slope."""
    def slope(r: float) -> float:
        return (energy(r + delta) - energy(r - delta)) / (2.0 * delta)

    root, info = brentq(slope, *bracket, xtol=1e-10, full_output=True)
    if not info.converged:
        raise NumericalError(f"equilibrium search did not converge near r={root:.6f}")
    return OracleResult(values=[float(root)], errors=[1e-8], method="Brent root of dE/dr",
                        labels=["r_eq"])


def golden_rule_loss(times: Sequence[float], vector_potential: Sequence[float],
                     weights: Sequence[float], alpha: float = 0.1,
                     p0_sink: float = 1.0) -> OracleResult:
    """First-order estimate of the probability absorbed by the sink.

    loss = sum_l w_l  integral 2 pi (alpha (e / m c) |A(t)| p0)^2 / eps_sink dt,
    with w_l the channel weights |(S psi)_l|^2 of the initial state.
    """
    times = np.asarray(times, dtype=float)
    magnitude = np.abs(np.asarray(vector_potential, dtype=float))
    coupling = alpha * ELEMENTARY_CHARGE / (ELECTRON_MASS * SPEED_OF_LIGHT) * magnitude * p0_sink
    energy = p0_sink ** 2 / (2.0 * ELECTRON_MASS)
    rate = 2.0 * np.pi * coupling ** 2 / energy
    total = float(np.sum(weights)) * float(integrate.trapezoid(rate, times))
    spacing = float(np.max(np.diff(times))) if len(times) > 1 else 0.0
    error = abs(total) * spacing ** 2
    return OracleResult(values=[total], errors=[error], method="golden rule, trapezoid in time",
                        labels=["loss"])


# ------------------------------------------------------------ CLI fixtures

def _demo_orbitals() -> tuple[OrbitalSpec, OrbitalSpec]:
    return OrbitalSpec("X", "s", 0.5, 0.0), OrbitalSpec("X", "pz", 0.5, 0.1)


def _fixture_quadrature() -> dict[str, OracleResult]:
    s, p = _demo_orbitals()
    d = np.array([0.3, -0.2, 1.1])
    return {
        "overlap s-s (d=0)": quadrature_matrix_element("overlap", s, s, np.zeros(3)),
        "overlap s-pz": quadrature_matrix_element("overlap", s, p, d),
        "dipole s-s (d=0)": quadrature_matrix_element("dipole", s, s, np.zeros(3)),
        "dipole s-pz (d=0)": quadrature_matrix_element("dipole", s, p, np.zeros(3)),
        "momentum s-pz": quadrature_matrix_element("momentum", s, p, d),
    }


def _fixture_rabi() -> dict[str, OracleResult]:
    rabi = 0.002 * 1.0 / (2.0 * np.sqrt(0.5))
    times = np.linspace(0.0, 3.0 * 2.0 * np.pi / rabi, 13)
    return {f"rabi (Omega={rabi:.4g})": rabi_population(times, rabi)}


def _fixture_landau_zener() -> dict[str, OracleResult]:
    gap = 0.01
    velocities = np.geomspace(1e-4, 1.5e-3, 10)
    return {f"landau_zener (gap={gap})": landau_zener_probability(0.5 * gap, velocities)}


def _fixture_free_phase() -> dict[str, OracleResult]:
    return {"free_phase (E=-0.5)": free_phase(np.linspace(0.0, 4.0 * np.pi, 9), -0.5)}


def _fixture_dimer() -> dict[str, OracleResult]:
    s_orbital = OrbitalSpec("A", "s", 0.5, -0.5)
    overlap = quadrature_matrix_element("overlap", s_orbital, s_orbital, [0.0, 0.0, 1.4])
    s12 = overlap.values[0]
    return {"dimer levels (r=1.4)": generalized_eigen_2x2(-0.5, -0.5, 1.75 * s12 * -0.5, s12)}


ORACLE_FIXTURES: dict[str, Callable[[], dict[str, OracleResult]]] = {
    "quadrature": _fixture_quadrature,
    "rabi": _fixture_rabi,
    "landau_zener": _fixture_landau_zener,
    "free_phase": _fixture_free_phase,
    "dimer": _fixture_dimer,
}


def run_fixture(name: str) -> dict[str, OracleResult]:
    """Reference values of a named CLI fixture.

    Raises:
        ValueError: If the fixture is unknown
    """
    if name not in ORACLE_FIXTURES:
        raise ValueError(f"Unsupported fixture: '{name}'. "
                         f"Available fixtures: {', '.join(ORACLE_FIXTURES)}")
    logger.debug("Running oracle fixture %s", name)
    return ORACLE_FIXTURES[name]()


def list_fixtures() -> list[str]:
    return list(ORACLE_FIXTURES)

