"""Instantaneous Born-Oppenheimer analysis.

Adiabatic states solve the field-free generalized problem H0 Psi = E S0 Psi.
Nonadiabatic couplings use the nonorthogonal Hellmann-Feynman form

    F_ij = Psi_i^+ (dH0 - E_j dS0) Psi_j / (E_j - E_i)

which equals Psi_i^+ S0 dPsi_j. The low-level functions take plain
matrices so that model Hamiltonians can be analysed directly; the
geometry wrappers build those matrices from the pair tables.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.optimize import linear_sum_assignment

from peierlsmd.errors import DegeneratePairError, NumericalError
from peierlsmd.units import HBAR

logger = logging.getLogger(__name__)

DEFAULT_THETA = 0.1
DEFAULT_DEGENERACY_TOL = 1e-8
DEFAULT_ORTHONORMALITY = 1e-10
CRITERIA = ("massey", "literal")


@dataclass(frozen=True, eq=False)
class AdiabaticSnapshot:
    """Adiabatic analysis at one time.

    Attributes:
        energies: (M,) ascending
        vectors: (N, M) S0-orthonormal eigenvectors
        couplings: (K, M, M) F_ij per nuclear coordinate, NaN where undefined
        populations: (n_states, M) |c_i|^2 of every electron state
        amplitudes: (n_states, M) complex c_i
        ratios: (M, M) criterion ratios rho_ij
        nonadiabatic: Pairs (i, j), i < j, classified nonadiabatic
        t: Time of the snapshot
    """
    energies: np.ndarray
    vectors: np.ndarray
    couplings: Optional[np.ndarray] = None
    populations: Optional[np.ndarray] = None
    amplitudes: Optional[np.ndarray] = None
    ratios: Optional[np.ndarray] = None
    nonadiabatic: tuple[tuple[int, int], ...] = field(default_factory=tuple)
    t: float = 0.0

    @property
    def gaps(self) -> np.ndarray:
        return np.diff(self.energies)

    def level_populations(self, occupations: np.ndarray) -> np.ndarray:
        """Occupation-weighted population of every level."""
        return np.asarray(occupations) @ self.populations


@dataclass(frozen=True)
class AdiabaticitySettings:
    theta: float = DEFAULT_THETA
    degeneracy_tol: float = DEFAULT_DEGENERACY_TOL
    criterion: str = "massey"
    representative_mass: Optional[float] = None
    orthonormality: float = DEFAULT_ORTHONORMALITY

    def __post_init__(self) -> None:
        if self.criterion not in CRITERIA:
            raise ValueError(f"Unsupported criterion: '{self.criterion}'. "
                             f"Available criteria: {', '.join(CRITERIA)}")


def _orthonormalize_clusters(energies: np.ndarray, vectors: np.ndarray, s: np.ndarray,
                             tol: float) -> np.ndarray:
    """S-Gram-Schmidt inside every cluster of (near-)degenerate levels."""
    vectors = vectors.copy()
    start = 0
    while start < len(energies):
        stop = start + 1
        while stop < len(energies) and energies[stop] - energies[stop - 1] <= tol:
            stop += 1
        for j in range(start, stop):
            v = vectors[:, j]
            for i in range(start, j):
                v = v - vectors[:, i] * (vectors[:, i].conj() @ s @ v)
            vectors[:, j] = v / np.sqrt(np.real(v.conj() @ s @ v))
        start = stop
    return vectors


def solve_generalized(h: np.ndarray, s: np.ndarray,
                      degeneracy_tol: float = DEFAULT_DEGENERACY_TOL,
                      orthonormality: float = DEFAULT_ORTHONORMALITY) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of H Psi = E S Psi with S-orthonormal vectors.

    Raises:
        NumericalError: If the eigensolver fails, S is not positive definite
            or max |Psi^+ S Psi - I| exceeds ``orthonormality``
    """
    try:
        energies, vectors = linalg.eigh(h, s)
    except linalg.LinAlgError as exc:
        condition = float(np.linalg.cond(s))
        raise NumericalError(f"generalized eigensolver failed: {exc}", condition=condition) from exc
    # sign convention: largest component real positive
    lead = vectors[np.argmax(np.abs(vectors), axis=0), np.arange(vectors.shape[1])]
    vectors = vectors * (np.abs(lead) / lead)[None, :]
    vectors = _orthonormalize_clusters(energies, vectors, s, degeneracy_tol)
    residual = float(np.max(np.abs(vectors.conj().T @ s @ vectors - np.eye(len(energies)))))
    if residual > orthonormality:
        raise NumericalError(f"eigenvectors are not S-orthonormal (residual {residual:.3e})",
                             condition=float(np.linalg.cond(s)))
    return energies, vectors


def coupling_matrix(energies: np.ndarray, vectors: np.ndarray, dh: np.ndarray,
                    ds: np.ndarray, degeneracy_tol: float = DEFAULT_DEGENERACY_TOL,
                    pairs: Optional[Sequence[tuple[int, int]]] = None) -> np.ndarray:
    """F_ij for every coordinate of ``dh``/``ds`` (shape (K, N, N)).

    Degenerate pairs and the diagonal are NaN. Requesting a degenerate
    pair explicitly through ``pairs`` raises DegeneratePairError.
    """
    dh = np.asarray(dh)
    ds = np.asarray(ds)
    m = len(energies)
    gap = energies[None, :] - energies[:, None]  # E_j - E_i
    dh_ad = np.einsum("ai,kab,bj->kij", vectors.conj(), dh, vectors)
    ds_ad = np.einsum("ai,kab,bj->kij", vectors.conj(), ds, vectors)
    numerator = dh_ad - energies[None, None, :] * ds_ad
    degenerate = np.abs(gap) <= degeneracy_tol
    if pairs is not None:
        for i, j in pairs:
            if i == j or degenerate[i, j]:
                raise DegeneratePairError(i, j, float(abs(gap[i, j])))
    with np.errstate(divide="ignore", invalid="ignore"):
        couplings = numerator / np.where(degenerate, np.nan, gap)[None]
    couplings[:, np.arange(m), np.arange(m)] = np.nan
    return couplings


def project(coefficients: np.ndarray, vectors: np.ndarray, s0: np.ndarray,
            dressing: Optional[np.ndarray] = None) -> np.ndarray:
    """Amplitudes c_i = (D Psi_i)^+ S psi = Psi_i^+ S0 D^+ psi, shape (n_states, M)."""
    psi = np.asarray(coefficients)
    if dressing is not None:
        psi = dressing.conj()[:, None] * psi
    return (vectors.conj().T @ s0 @ psi).T


def criterion_ratios(energies: np.ndarray, couplings: np.ndarray, velocities: np.ndarray,
                     settings: AdiabaticitySettings = AdiabaticitySettings()) -> np.ndarray:
    """rho_ij for every pair; inf marks degenerate pairs.

    ``massey``: hbar |Xdot . F_ij| / |E_i - E_j|.
    ``literal``: |F_ij| hbar / P_i with P_i = sqrt(2 M |E_i|).
    """
    velocities = np.asarray(velocities, dtype=float).ravel()
    gap = np.abs(energies[None, :] - energies[:, None])
    finite = np.nan_to_num(couplings, nan=0.0)
    if settings.criterion == "massey":
        rho = HBAR * np.abs(np.einsum("k,kij->ij", velocities, finite)) / np.where(gap > 0, gap, 1.0)
    else:
        if settings.representative_mass is None:
            raise ValueError("the literal criterion needs a representative mass")
        if not np.any(velocities):
            rho = np.zeros_like(gap)
        else:
            momentum = np.sqrt(2.0 * settings.representative_mass * np.abs(energies))
            norm = np.linalg.norm(finite, axis=0)
            rho = HBAR * norm / np.where(momentum > 0, momentum, np.inf)[:, None]
    rho = np.where(gap <= settings.degeneracy_tol, np.inf, rho)
    rho[np.diag_indices(len(energies))] = 0.0
    return rho


def adiabaticity(snapshot: AdiabaticSnapshot, velocities: np.ndarray,
                 settings: AdiabaticitySettings = AdiabaticitySettings()) -> AdiabaticSnapshot:
    """Classify every pair; returns the snapshot with ratios and flagged pairs filled in."""
    if snapshot.couplings is None:
        raise ValueError("snapshot carries no couplings")
    rho = criterion_ratios(snapshot.energies, snapshot.couplings, velocities, settings)
    m = len(snapshot.energies)
    flagged = tuple((i, j) for i in range(m) for j in range(i + 1, m)
                    if rho[i, j] >= settings.theta)
    return replace(snapshot, ratios=rho, nonadiabatic=flagged)


def classify(snapshot: AdiabaticSnapshot) -> dict[tuple[int, int], str]:
    m = len(snapshot.energies)
    flagged = set(snapshot.nonadiabatic)
    return {(i, j): "nonadiabatic" if (i, j) in flagged else "adiabatic"
            for i in range(m) for j in range(i + 1, m)}


def track_states(previous: np.ndarray, current: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Order of ``current`` columns best matching ``previous`` by |Psi_i^+ S Psi_j|."""
    overlap = np.abs(previous.conj().T @ s @ current)
    _, order = linear_sum_assignment(-overlap)
    return order


def analyze_matrices(h: np.ndarray, s: np.ndarray, dh: np.ndarray, ds: np.ndarray,
                     velocities: np.ndarray, coefficients: Optional[np.ndarray] = None,
                     settings: AdiabaticitySettings = AdiabaticitySettings(),
                     dressing: Optional[np.ndarray] = None, t: float = 0.0) -> AdiabaticSnapshot:
    """Full snapshot of a model given as plain matrices."""
    energies, vectors = solve_generalized(h, s, settings.degeneracy_tol, settings.orthonormality)
    couplings = coupling_matrix(energies, vectors, dh, ds, settings.degeneracy_tol)
    snapshot = AdiabaticSnapshot(energies=energies, vectors=vectors, couplings=couplings, t=t)
    if coefficients is not None:
        amplitudes = project(coefficients, vectors, s, dressing)
        snapshot = replace(snapshot, amplitudes=amplitudes, populations=np.abs(amplitudes) ** 2)
    return adiabaticity(snapshot, velocities, settings)


def eigensolve(geometry, tables, degeneracy_tol: float = DEFAULT_DEGENERACY_TOL,
               orthonormality: float = DEFAULT_ORTHONORMALITY) -> AdiabaticSnapshot:
    """Field-free adiabatic states of a geometry."""
    blocks = tables.field_free(geometry.roster, geometry.positions)
    energies, vectors = solve_generalized(blocks.h0, blocks.s0, degeneracy_tol, orthonormality)
    return AdiabaticSnapshot(energies=energies, vectors=vectors)


def cartesian_derivatives(geometry, tables) -> tuple[np.ndarray, np.ndarray]:
    """dH0/dX and dS0/dX for every nuclear coordinate, (3 n_atoms, N, N)."""
    grads = tables.gradients(geometry.roster, geometry.positions)
    atom_of = geometry.roster.atom_of
    dh = np.zeros((geometry.atom_count * 3,) + grads.ds0.shape[1:])
    ds = np.zeros_like(dh)
    for atom in range(geometry.atom_count):
        row = (atom_of == atom)[:, None].astype(float)
        col = (atom_of == atom)[None, :].astype(float)
        for axis in range(3):
            dh[3 * atom + axis] = grads.dh0[axis] * row - grads.dh0[axis] * col
            ds[3 * atom + axis] = grads.ds0[axis] * row - grads.ds0[axis] * col
    return dh, ds


def couplings(snapshot: AdiabaticSnapshot, geometry, tables,
              degeneracy_tol: float = DEFAULT_DEGENERACY_TOL,
              pairs: Optional[Sequence[tuple[int, int]]] = None) -> np.ndarray:
    """F_ij per nuclear coordinate, shape (n_atoms, 3, M, M)."""
    dh, ds = cartesian_derivatives(geometry, tables)
    values = coupling_matrix(snapshot.energies, snapshot.vectors, dh, ds, degeneracy_tol, pairs)
    m = len(snapshot.energies)
    return values.reshape(geometry.atom_count, 3, m, m)


def representative_mass(geometry, coupling: np.ndarray) -> float:
    """Reduced mass of the atom pair dominating a coupling vector (n_atoms, 3)."""
    weight = np.linalg.norm(np.nan_to_num(coupling), axis=1)
    if geometry.atom_count < 2:
        return float(geometry.masses[0])
    first, second = np.argsort(weight)[::-1][:2]
    m1, m2 = geometry.masses[first], geometry.masses[second]
    return float(m1 * m2 / (m1 + m2))


def snapshot(geometry, tables, coefficients: np.ndarray,
             settings: AdiabaticitySettings = AdiabaticitySettings(),
             dressing: Optional[np.ndarray] = None, t: float = 0.0) -> AdiabaticSnapshot:
    """Adiabatic snapshot of an electron state at a geometry."""
    blocks = tables.field_free(geometry.roster, geometry.positions)
    dh, ds = cartesian_derivatives(geometry, tables)
    if settings.criterion == "literal" and settings.representative_mass is None:
        energies, vectors = solve_generalized(blocks.h0, blocks.s0, settings.degeneracy_tol,
                                              settings.orthonormality)
        values = coupling_matrix(energies, vectors, dh, ds, settings.degeneracy_tol)
        dominant = np.nanmax(np.abs(values), axis=(1, 2))
        settings = replace(settings, representative_mass=representative_mass(
            geometry, np.nan_to_num(dominant).reshape(geometry.atom_count, 3)))
    return analyze_matrices(blocks.h0, blocks.s0, dh, ds, geometry.velocities.ravel(),
                            coefficients, settings, dressing, t)
