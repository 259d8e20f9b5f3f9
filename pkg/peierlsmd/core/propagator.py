"""Implicit-midpoint integration of i hbar S dpsi/dt = H psi.

Steps run in the Loewdin frame phi = R psi with R = S^(1/2), where the
equation reads i hbar dphi/dt = G phi with

    G = R^-1 H R^-1 + i hbar (dR/dt) R^-1

One step takes R at both ends of the interval, R_m as their mean, dR/dt
as their difference quotient and H at t + dt/2, then solves

    (1 + i dt/2hbar G_m) phi(t+dt) = (1 - i dt/2hbar G_m) phi(t)

and maps back with R(t+dt)^-1. For constant S this is the Cayley step
(S + i dt/2hbar H) psi(t+dt) = (S - i dt/2hbar H) psi(t). When the
coupling conserves the norm, H - H^+ = -i hbar dS/dt and G_m is replaced
by its Hermitian part, so psi^+ S(t) psi and every cross-overlap are
carried over exactly.

The operator is LU-factorized once and shared by all occupied states.
The fixed-point correction of the midpoint solution is iterative
refinement against that factorization.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Protocol

import numpy as np
from scipy import linalg

from peierlsmd.core.coupling import MatrixSet
from peierlsmd.errors import NumericalError
from peierlsmd.units import HBAR

logger = logging.getLogger(__name__)


class Assembler(Protocol):
    """Anything that yields dressed matrices along the current trajectory."""

    def matrices(self, t: float) -> MatrixSet:
        ...


@dataclass(frozen=True, eq=False)
class ElectronState:
    """Occupied one-electron states.

    Attributes:
        coefficients: (N, n_states) complex, one column per state psi_n
        occupations: (n_states,) occupation numbers f_n
        t: Current time
        transferred: (n_states, N) cumulative sink transfer per channel
    """
    coefficients: np.ndarray
    occupations: np.ndarray
    t: float = 0.0
    transferred: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.coefficients.ndim != 2:
            raise ValueError("coefficients must have shape (N, n_states)")
        if len(self.occupations) != self.coefficients.shape[1]:
            raise ValueError("one occupation per state is required")

    @property
    def size(self) -> int:
        return self.coefficients.shape[0]

    @property
    def state_count(self) -> int:
        return self.coefficients.shape[1]

    @property
    def electron_count(self) -> float:
        return float(np.sum(self.occupations))

    def with_coefficients(self, coefficients: np.ndarray, t: Optional[float] = None,
                          transferred: Optional[np.ndarray] = None) -> "ElectronState":
        return replace(self, coefficients=np.asarray(coefficients, dtype=complex),
                       t=self.t if t is None else t,
                       transferred=self.transferred if transferred is None else transferred)

    def overlap_matrix(self, s: np.ndarray) -> np.ndarray:
        """psi_n^+ S psi_m for all state pairs."""
        return self.coefficients.conj().T @ s @ self.coefficients

    def norms(self, s: np.ndarray) -> np.ndarray:
        return np.real(np.einsum("in,ij,jn->n", self.coefficients.conj(), s, self.coefficients))

    def max_cross_overlap(self, s: np.ndarray) -> float:
        gram = self.overlap_matrix(s)
        if gram.shape[0] < 2:
            return 0.0
        return float(np.max(np.abs(gram - np.diag(np.diag(gram)))))

    def orbital_populations(self, s: np.ndarray) -> np.ndarray:
        """Mulliken populations sum_n f_n Re(psi_n(l)* (S psi_n)(l))."""
        spsi = s @ self.coefficients
        return np.real(np.sum(self.occupations[None, :] * self.coefficients.conj() * spsi, axis=1))

    def total_transferred(self) -> np.ndarray:
        if self.transferred is None:
            return np.zeros(self.state_count)
        return self.transferred.sum(axis=1)


@dataclass(frozen=True)
class StepTolerances:
    """Acceptance rules of a single step."""
    norm_drift: float = 1e-6
    max_halvings: int = 8
    refinement_iterations: int = 3
    refinement_tol: float = 1e-12

    @classmethod
    def from_config(cls, block) -> "StepTolerances":
        return cls(norm_drift=block.step_norm_drift, max_halvings=block.max_halvings,
                   refinement_iterations=block.refinement_iterations,
                   refinement_tol=block.refinement_tol)


@dataclass
class TrajectoryFragment:
    """Per-output diagnostics collected by :func:`propagate`."""
    times: list[float] = field(default_factory=list)
    norms: list[np.ndarray] = field(default_factory=list)
    cross_overlaps: list[float] = field(default_factory=list)
    populations: list[np.ndarray] = field(default_factory=list)


def _generator(start: MatrixSet, mid: MatrixSet, end: MatrixSet,
               dt: float) -> tuple[np.ndarray, np.ndarray]:
    """G_m of the Loewdin frame and R_m^-1."""
    root0, _ = start.metric_root
    root1, _ = end.metric_root
    inv_m = linalg.inv(0.5 * (root0 + root1))
    rate = (root1 - root0) / dt
    if mid.conserves_norm:
        hermitian = 0.5 * (mid.h + mid.h.conj().T)
        g = inv_m @ hermitian @ inv_m + 0.5j * HBAR * (rate @ inv_m - inv_m @ rate)
        g = 0.5 * (g + g.conj().T)
    else:
        g = inv_m @ mid.h @ inv_m + 1j * HBAR * rate @ inv_m
    if mid.loss is not None:
        g = g - 1j * (inv_m @ mid.loss @ inv_m)
    return g, inv_m


def _solve_midpoint(phi: np.ndarray, g: np.ndarray, dt: float,
                    tol: StepTolerances) -> np.ndarray:
    scaled = 0.5j * dt / HBAR * g
    identity = np.eye(g.shape[0])
    lhs = identity + scaled
    rhs = (identity - scaled) @ phi
    try:
        lu, piv = linalg.lu_factor(lhs, check_finite=True)
    except (ValueError, linalg.LinAlgError) as exc:
        raise NumericalError(f"step operator could not be factorized: {exc}") from exc
    pivots = np.abs(np.diag(lu))
    if not np.all(np.isfinite(pivots)) or np.min(pivots) == 0.0:
        raise NumericalError("step operator is singular", condition=float(np.linalg.cond(lhs)))
    solution = linalg.lu_solve((lu, piv), rhs)
    scale = max(float(np.max(np.abs(rhs))), 1.0)
    for _ in range(tol.refinement_iterations):
        residual = rhs - lhs @ solution
        if float(np.max(np.abs(residual))) <= tol.refinement_tol * scale:
            break
        solution = solution + linalg.lu_solve((lu, piv), residual)
    if not np.all(np.isfinite(solution)):
        raise NumericalError("step produced non-finite coefficients",
                             condition=float(np.linalg.cond(lhs)))
    return solution


def _norm_drift(psi0: np.ndarray, psi1: np.ndarray, middle: np.ndarray, start: MatrixSet,
                mid: MatrixSet, end: MatrixSet, dt: float) -> tuple[float, np.ndarray]:
    """Largest per-state norm error of one step, and the per-channel sink transfer.

    The error is the step's change of psi^+ S psi minus the change the
    equation of motion prescribes over the interval,

        dt middle^+ [(S1 - S0)/dt - (i/hbar)(H_eff - H_eff^+)] middle

    which includes the sink drain.
    """
    transfer = np.zeros((psi0.shape[1], psi0.shape[0]))
    if mid.loss is not None and mid.sink_rates is not None:
        # channel l drains at rate Gamma_l |(S psi)_l|^2
        transfer = dt * mid.sink_rates[None, :] * np.abs(mid.s @ middle).T ** 2
    n0 = np.real(np.einsum("in,ij,jn->n", psi0.conj(), start.s, psi0))
    n1 = np.real(np.einsum("in,ij,jn->n", psi1.conj(), end.s, psi1))
    effective = mid.effective_h
    rate = (end.s - start.s) / dt - 1j / HBAR * (effective - effective.conj().T)
    expected = dt * np.real(np.einsum("in,ij,jn->n", middle.conj(), rate, middle))
    return float(np.max(np.abs(n1 - n0 - expected))), transfer


def _single_step(psi: np.ndarray, assembler: Assembler, t: float, dt: float,
                 tol: StepTolerances) -> tuple[np.ndarray, np.ndarray, float]:
    start = assembler.matrices(t)
    mid = assembler.matrices(t + 0.5 * dt)
    end = assembler.matrices(t + dt)
    g, inv_m = _generator(start, mid, end, dt)
    phi0 = start.metric_root[0] @ psi
    phi1 = _solve_midpoint(phi0, g, dt, tol)
    psi1 = end.metric_root[1] @ phi1
    middle = inv_m @ (0.5 * (phi0 + phi1))
    drift, transfer = _norm_drift(psi, psi1, middle, start, mid, end, dt)
    return psi1, transfer, drift


def step(state: ElectronState, assembler: Assembler, dt: float,
         tolerances: StepTolerances = StepTolerances()) -> ElectronState:
    """Advance every occupied state from t to t + dt.

    A step whose norm drift exceeds ``tolerances.norm_drift`` is redone as
    two half steps, recursively, up to ``max_halvings`` times. In the
    norm-conserving mode the drift measures how far H - H^+ is from
    -i hbar dS/dt over the step.

    Raises:
        NumericalError: If S is not positive definite, the operator is
            singular or the drift persists
    """
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    psi, transfer = _advance(state.coefficients, assembler, state.t, dt, tolerances, 0)
    transferred = transfer if state.transferred is None else state.transferred + transfer
    return state.with_coefficients(psi, t=state.t + dt, transferred=transferred)


def _advance(psi: np.ndarray, assembler: Assembler, t: float, dt: float,
             tol: StepTolerances, depth: int) -> tuple[np.ndarray, np.ndarray]:
    psi1, transfer, drift = _single_step(psi, assembler, t, dt, tol)
    if drift <= tol.norm_drift:
        return psi1, transfer
    if depth >= tol.max_halvings:
        raise NumericalError(
            f"norm drift {drift:.3e} at t = {t:.6g} persists after "
            f"{tol.max_halvings} step halvings",
            condition=drift,
        )
    logger.debug("Norm drift %.3e at t=%.6g, halving dt to %.3e", drift, t, 0.5 * dt)
    half = 0.5 * dt
    psi_mid, first = _advance(psi, assembler, t, half, tol, depth + 1)
    psi_end, second = _advance(psi_mid, assembler, t + half, half, tol, depth + 1)
    return psi_end, first + second


def propagate(state: ElectronState, schedule: tuple[float, float], assembler: Assembler,
              tolerances: StepTolerances = StepTolerances(),
              output_stride: int = 1,
              projector=None) -> tuple[ElectronState, TrajectoryFragment]:
    """Repeated steps up to ``t_end``, recording diagnostics every ``output_stride`` steps.

    Args:
        state: Initial state
        schedule: (t_end, dt); the last step is shortened to land on t_end
        assembler: Matrix provider
        tolerances: Step acceptance rules
        output_stride: Steps between recorded diagnostics
        projector: Optional callable (state, matrices) -> populations

    Returns:
        (final state, recorded fragment)
    """
    t_end, dt = schedule
    if not t_end > state.t:
        raise ValueError("t_end must lie after the current time")
    fragment = TrajectoryFragment()

    def record(current: ElectronState) -> None:
        matrices = assembler.matrices(current.t)
        fragment.times.append(current.t)
        fragment.norms.append(current.norms(matrices.s))
        fragment.cross_overlaps.append(current.max_cross_overlap(matrices.s))
        if projector is not None:
            fragment.populations.append(projector(current, matrices))

    record(state)
    count = 0
    while t_end - state.t > 1e-12 * max(1.0, abs(t_end)):
        state = step(state, assembler, min(dt, t_end - state.t), tolerances)
        count += 1
        if count % output_stride == 0:
            record(state)
    if count % output_stride:
        record(state)
    return state, fragment
