"""Field-dressed matrices in the nonorthogonal orbital basis.

For an ordered orbital pair (l', l) with centres X', X every dressed
element carries the Peierls phase exp(i q A.(X' - X) / hbar c):

    S = S0 ph
    H = H0 ph - E.mu0 ph - V.(p0 ph + (q/c) A S)

where V is the nuclear velocity attached to the ket orbital (or the pair
average). ``peierls_only`` keeps only H0 ph; ``generalized_peierls``
dresses S0 and H0 with the per-orbital phases
exp(i [(q/c) A + m Xdot] . X).
"""
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import TYPE_CHECKING, Optional

import numpy as np
from scipy import linalg

from peierlsmd.errors import NumericalError
from peierlsmd.units import ELECTRON_MASS, HBAR, Q_ELECTRON, SPEED_OF_LIGHT

if TYPE_CHECKING:
    from peierlsmd.core.nuclei import SystemGeometry
    from peierlsmd.core.propagator import ElectronState
    from peierlsmd.model.tables import FieldFreeBlocks, FieldFreeGradients, PairTable

logger = logging.getLogger(__name__)

COUPLING_MODES = ("full", "peierls_only", "generalized_peierls")
VELOCITY_ATOMS = ("ket", "average")

_CHARGE_OVER_C = Q_ELECTRON / (HBAR * SPEED_OF_LIGHT)


@dataclass(frozen=True)
class CouplingFlags:
    """Which light-matter terms enter the Hamiltonian."""
    dipole_on: bool = True
    velocity_on: bool = True
    mode: str = "full"
    velocity_atom: str = "ket"
    dipole_onsite_only: bool = False

    def __post_init__(self) -> None:
        if self.mode not in COUPLING_MODES:
            raise ValueError(f"Unsupported coupling mode: '{self.mode}'. "
                             f"Available modes: {', '.join(COUPLING_MODES)}")
        if self.velocity_atom not in VELOCITY_ATOMS:
            raise ValueError(f"Unsupported velocity atom: '{self.velocity_atom}'")

    @classmethod
    def from_config(cls, block) -> "CouplingFlags":
        return cls(dipole_on=block.dipole, velocity_on=block.velocity_term, mode=block.mode,
                   velocity_atom=block.velocity_atom,
                   dipole_onsite_only=block.dipole_onsite_only)

    @property
    def conserves_norm(self) -> bool:
        """True when H - H^dagger = -i dS/dt holds exactly for moving nuclei and fields."""
        return (self.mode == "full" and self.dipole_on and self.velocity_on
                and self.velocity_atom == "ket" and not self.dipole_onsite_only)


@dataclass(frozen=True, eq=False)
class MatrixSet:
    """Dressed matrices at one time and geometry.

    Attributes:
        s: Overlap S (N, N)
        h: Hamiltonian H (N, N), not Hermitian in general
        mu: Dressed dipole mu0 ph (3, N, N)
        p: Dressed momentum p0 ph (3, N, N)
        pp: Velocity-term matrices P = p + (q/c) A S (3, N, N)
        h_el: Energy operator H0 ph - E.mu, used for diagnostics
        loss: Hermitian absorbing operator applied as H - i loss
        sink_rates: Per-orbital sink rates behind ``loss``
        explicit_sink: Last row and column hold the one-way sink orbital
    """
    s: np.ndarray
    h: np.ndarray
    mu: Optional[np.ndarray] = None
    p: Optional[np.ndarray] = None
    pp: Optional[np.ndarray] = None
    h_el: Optional[np.ndarray] = None
    t: float = 0.0
    flags: CouplingFlags = field(default_factory=CouplingFlags)
    loss: Optional[np.ndarray] = None
    sink_rates: Optional[np.ndarray] = None
    explicit_sink: bool = False

    @property
    def size(self) -> int:
        return self.s.shape[0]

    @property
    def effective_h(self) -> np.ndarray:
        return self.h if self.loss is None else self.h - 1j * self.loss

    @property
    def conserves_norm(self) -> bool:
        return self.flags.conserves_norm and not self.explicit_sink

    @cached_property
    def metric_root(self) -> tuple[np.ndarray, np.ndarray]:
        """S^(1/2) and S^(-1/2).

        Raises:
            NumericalError: If S is not positive definite
        """
        try:
            values, vectors = linalg.eigh(self.s)
        except (ValueError, linalg.LinAlgError) as exc:
            raise NumericalError(f"overlap matrix could not be diagonalized: {exc}") from exc
        if not values[0] > 0.0:
            smallest = max(abs(values[0]), np.finfo(float).tiny)
            raise NumericalError("overlap matrix is not positive definite",
                                 condition=float(abs(values[-1]) / smallest))
        root = np.sqrt(values)
        adjoint = vectors.conj().T
        return (vectors * root) @ adjoint, (vectors / root) @ adjoint

    def with_loss(self, loss: np.ndarray, rates: np.ndarray) -> "MatrixSet":
        return replace(self, loss=loss, sink_rates=rates)


@dataclass(frozen=True, eq=False)
class MatrixGradients:
    """Nuclear-position derivatives of H and S in row/column form.

    For atom a, dM/dX_a = sum over elements whose bra sits on a of ``row``
    plus those whose ket sits on a of ``col``. Arrays are (3, N, N).
    """
    row_h: np.ndarray
    col_h: np.ndarray
    row_s: np.ndarray
    col_s: np.ndarray


def peierls_phase_angles(centers: np.ndarray, abar: np.ndarray) -> np.ndarray:
    """theta_l = q A.X_l / hbar c for every orbital centre."""
    return _CHARGE_OVER_C * np.asarray(centers, dtype=float) @ np.asarray(abar, dtype=float)


def dressing_angles(geometry: "SystemGeometry", abar: np.ndarray,
                    xdot: Optional[np.ndarray] = None,
                    flags: CouplingFlags = CouplingFlags()) -> np.ndarray:
    """Per-orbital phase angles relating dressed and field-free bases."""
    centers = geometry.roster.centers(geometry.positions)
    theta = peierls_phase_angles(centers, abar)
    if flags.mode == "generalized_peierls":
        velocities = geometry.velocities if xdot is None else np.asarray(xdot, dtype=float)
        orbital_v = velocities[geometry.roster.atom_of]
        theta = theta + ELECTRON_MASS / HBAR * np.einsum("ij,ij->i", orbital_v, centers)
    return theta


def _velocity_field(atom_of: np.ndarray, xdot: np.ndarray, flags: CouplingFlags) -> np.ndarray:
    """Velocity contracted with element (l', l), shape (3, N, N)."""
    orbital_v = np.asarray(xdot, dtype=float)[atom_of].T
    if flags.velocity_atom == "ket":
        return np.broadcast_to(orbital_v[:, None, :], (3,) + (len(atom_of),) * 2)
    return 0.5 * (orbital_v[:, :, None] + orbital_v[:, None, :])


def assemble(geometry: "SystemGeometry", tables: "PairTable", abar: np.ndarray,
             ebar: np.ndarray, xdot: Optional[np.ndarray] = None,
             flags: CouplingFlags = CouplingFlags(), t: float = 0.0,
             blocks: Optional["FieldFreeBlocks"] = None) -> MatrixSet:
    """Assemble the dressed MatrixSet for one geometry and field.

    Args:
        geometry: Nuclear geometry with its orbital roster
        tables: Field-free pair tables
        abar: Bond-averaged vector potential
        ebar: Electric field
        xdot: Per-atom velocities (default: the geometry's)
        flags: Coupling terms and mode
        t: Time stamp stored on the result
        blocks: Precomputed field-free blocks for this geometry

    Returns:
        MatrixSet with S, H and the dressed mu, p, P matrices
    """
    abar = np.asarray(abar, dtype=float)
    ebar = np.asarray(ebar, dtype=float)
    xdot = geometry.velocities if xdot is None else np.asarray(xdot, dtype=float)
    if blocks is None:
        blocks = tables.field_free(geometry.roster, geometry.positions)

    centers = geometry.roster.centers(geometry.positions)
    theta = peierls_phase_angles(centers, abar)
    ph = np.exp(1j * (theta[:, None] - theta[None, :]))

    s = blocks.s0 * ph
    mu0 = blocks.mu0
    if flags.dipole_onsite_only:
        mu0 = np.where(blocks.onsite[None, :, :], mu0, 0.0)
    mu = mu0 * ph
    p = blocks.p0 * ph
    pp = p + _CHARGE_OVER_C * HBAR * abar[:, None, None] * s[None, :, :]
    h_peierls = blocks.h0 * ph
    h_el = h_peierls
    if flags.dipole_on and flags.mode != "peierls_only":
        h_el = h_peierls - np.einsum("k,kij->ij", ebar, mu)

    if flags.mode == "full":
        h = h_el
        if flags.velocity_on:
            velocity = _velocity_field(geometry.roster.atom_of, xdot, flags)
            h = h - np.einsum("kij,kij->ij", velocity, pp)
    elif flags.mode == "peierls_only":
        h = h_peierls
    else:
        angles = dressing_angles(geometry, abar, xdot, flags)
        dressed = np.exp(1j * (angles[:, None] - angles[None, :]))
        s = blocks.s0 * dressed
        h = blocks.h0 * dressed
        h_el = h
    return MatrixSet(s=s, h=h, mu=mu, p=p, pp=pp, h_el=h_el, t=t, flags=flags)


def matrix_gradients(geometry: "SystemGeometry", matrices: MatrixSet,
                     blocks: "FieldFreeBlocks", grads: "FieldFreeGradients",
                     abar: np.ndarray, ebar: np.ndarray,
                     xdot: Optional[np.ndarray] = None) -> MatrixGradients:
    """Nuclear-position derivatives of the assembled H and S.

    Phase factors are differentiated too: they depend on X' - X (and, in
    the generalized mode, on each centre separately).
    """
    abar = np.asarray(abar, dtype=float)
    ebar = np.asarray(ebar, dtype=float)
    xdot = geometry.velocities if xdot is None else np.asarray(xdot, dtype=float)
    flags = matrices.flags
    roster = geometry.roster

    if flags.mode == "generalized_peierls":
        angles = dressing_angles(geometry, abar, xdot, flags)
        dressed = np.exp(1j * (angles[:, None] - angles[None, :]))
        # d angle_l / d X_atom(l)
        k = _CHARGE_OVER_C * abar[None, :] + ELECTRON_MASS / HBAR * xdot[roster.atom_of]
        k = k.T
        dh = grads.dh0 * dressed
        ds = grads.ds0 * dressed
        row_h = dh + 1j * k[:, :, None] * matrices.h[None]
        col_h = -dh - 1j * k[:, None, :] * matrices.h[None]
        row_s = ds + 1j * k[:, :, None] * matrices.s[None]
        col_s = -ds - 1j * k[:, None, :] * matrices.s[None]
        return MatrixGradients(row_h, col_h, row_s, col_s)

    centers = roster.centers(geometry.positions)
    theta = peierls_phase_angles(centers, abar)
    ph = np.exp(1j * (theta[:, None] - theta[None, :]))
    phase_rate = _CHARGE_OVER_C * abar[:, None, None]

    core = grads.dh0.astype(complex)
    if flags.mode == "full":
        if flags.dipole_on:
            dmu0 = grads.dmu0
            if flags.dipole_onsite_only:
                dmu0 = np.zeros_like(dmu0)
            core = core - np.einsum("k,akij->aij", ebar, dmu0)
        if flags.velocity_on:
            velocity = _velocity_field(roster.atom_of, xdot, flags)
            dpp = grads.dp0 + _CHARGE_OVER_C * HBAR * abar[None, :, None, None] * grads.ds0[:, None]
            core = core - np.einsum("kij,akij->aij", velocity, dpp)
    dh = core * ph + 1j * phase_rate * matrices.h[None]
    ds = grads.ds0 * ph + 1j * phase_rate * matrices.s[None]
    return MatrixGradients(row_h=dh, col_h=-dh, row_s=ds, col_s=-ds)


def gauge_shift(state: "ElectronState", geometry: "SystemGeometry",
                delta_a: np.ndarray) -> "ElectronState":
    """Apply the constant gauge change psi(l) -> exp(i q dA.X_l / hbar c) psi(l)."""
    centers = geometry.roster.centers(geometry.positions)
    phases = np.exp(1j * peierls_phase_angles(centers, delta_a))
    return state.with_coefficients(phases[:, None] * state.coefficients)
