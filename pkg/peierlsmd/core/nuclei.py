"""Classical nuclei: geometry, pair repulsion, Ehrenfest forces, velocity Verlet.

The force on atom a is

    F_a = -sum_n f_n Re[psi_n^+ (dH/dX_a) psi_n - psi_n^+ (dS/dX_a) S^-1 H psi_n] - dU/dX_a

with analytic derivatives of every dressed matrix element, phases
included. There is no Pulay term: the matrix elements already follow the
moving orbitals.
"""
import logging
from dataclasses import dataclass, replace
from itertools import combinations
from typing import TYPE_CHECKING, Callable, Iterable, Mapping, Optional

import numpy as np
from scipy import linalg

from peierlsmd.errors import ConfigurationError, GeometryError
from peierlsmd.model.tables import OrbitalRoster
from peierlsmd.units import BOLTZMANN_HARTREE_PER_K

if TYPE_CHECKING:
    from peierlsmd.core.coupling import MatrixGradients, MatrixSet
    from peierlsmd.core.propagator import ElectronState

logger = logging.getLogger(__name__)

DEFAULT_MIN_DISTANCE = 0.1


@dataclass(frozen=True, eq=False)
class SystemGeometry:
    """Nuclear positions, velocities and masses plus the orbital roster.

    Attributes:
        species: Species label per atom
        positions: (n_atoms, 3) bohr
        velocities: (n_atoms, 3) bohr per atomic time unit
        masses: (n_atoms,) electron masses
        roster: Orbital roster, stable for a run
    """
    species: tuple[str, ...]
    positions: np.ndarray
    velocities: np.ndarray
    masses: np.ndarray
    roster: OrbitalRoster

    def __post_init__(self) -> None:
        if np.any(np.asarray(self.masses) <= 0.0):
            raise ValueError("nuclear masses must be positive")
        if np.shape(self.positions) != (len(self.species), 3):
            raise ValueError("positions must have shape (n_atoms, 3)")

    @property
    def atom_count(self) -> int:
        return len(self.species)

    def with_positions(self, positions: np.ndarray) -> "SystemGeometry":
        return replace(self, positions=np.asarray(positions, dtype=float))

    def with_velocities(self, velocities: np.ndarray) -> "SystemGeometry":
        return replace(self, velocities=np.asarray(velocities, dtype=float))

    def kinetic_energy(self) -> float:
        return float(0.5 * np.sum(self.masses[:, None] * self.velocities ** 2))

    def momentum(self) -> np.ndarray:
        return np.sum(self.masses[:, None] * self.velocities, axis=0)

    def distances(self) -> np.ndarray:
        delta = self.positions[:, None, :] - self.positions[None, :, :]
        return np.linalg.norm(delta, axis=-1)

    def check_separation(self, min_distance: float = DEFAULT_MIN_DISTANCE) -> None:
        """Raise GeometryError when two nuclei are closer than ``min_distance``."""
        if self.atom_count < 2:
            return
        r = self.distances()
        r[np.diag_indices(self.atom_count)] = np.inf
        i, j = np.unravel_index(np.argmin(r), r.shape)
        if r[i, j] < min_distance:
            raise GeometryError(
                f"atoms {i} ({self.species[i]}) and {j} ({self.species[j]}) overlap: "
                f"r = {r[i, j]:.4f} bohr < {min_distance} bohr",
                condition=float(r[i, j]),
            )


@dataclass(frozen=True)
class RepulsionSpec:
    """U(r) = B [exp(-lam r) - exp(-lam rc) + lam exp(-lam rc) (r - rc)] for r < rc."""
    b: float
    lam: float
    cutoff: float

    def energy(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        tail = np.exp(-self.lam * self.cutoff)
        value = self.b * (np.exp(-self.lam * r) - tail + self.lam * tail * (r - self.cutoff))
        return np.where(r < self.cutoff, value, 0.0)

    def derivative(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        tail = np.exp(-self.lam * self.cutoff)
        value = self.b * self.lam * (tail - np.exp(-self.lam * r))
        return np.where(r < self.cutoff, value, 0.0)


class RepulsionTable:
    """Pair repulsion for every species pair of a system."""

    def __init__(self, specs: Mapping[frozenset, RepulsionSpec]) -> None:
        self.specs = dict(specs)

    @classmethod
    def from_config(cls, blocks: Iterable) -> "RepulsionTable":
        return cls({frozenset(block.species): RepulsionSpec(block.b, block.lam, block.cutoff)
                    for block in blocks})

    def spec(self, first: str, second: str) -> RepulsionSpec:
        key = frozenset((first, second))
        if key not in self.specs:
            raise ConfigurationError(
                f"missing repulsion parameters for species pair {first}-{second}",
                field="repulsion",
            )
        return self.specs[key]

    def covers(self, species: Iterable[str]) -> bool:
        labels = sorted(set(species))
        return all(frozenset((a, b)) in self.specs
                   for i, a in enumerate(labels) for b in labels[i:])

    def energy(self, geometry: SystemGeometry) -> float:
        total = 0.0
        for i, j in combinations(range(geometry.atom_count), 2):
            r = np.linalg.norm(geometry.positions[i] - geometry.positions[j])
            total += float(self.spec(geometry.species[i], geometry.species[j]).energy(r))
        return total

    def gradient(self, geometry: SystemGeometry) -> np.ndarray:
        """dU/dX for every atom, (n_atoms, 3)."""
        grad = np.zeros_like(geometry.positions)
        for i, j in combinations(range(geometry.atom_count), 2):
            delta = geometry.positions[i] - geometry.positions[j]
            r = np.linalg.norm(delta)
            dudr = float(self.spec(geometry.species[i], geometry.species[j]).derivative(r))
            grad[i] += dudr * delta / r
            grad[j] -= dudr * delta / r
        return grad


def electronic_force(geometry: SystemGeometry, state: "ElectronState",
                     matrices: "MatrixSet", gradients: "MatrixGradients") -> np.ndarray:
    """Ehrenfest force from the electrons, (n_atoms, 3)."""
    psi = state.coefficients
    weights = state.occupations
    # S^-1 H psi, i.e. i hbar d psi / dt
    rate = linalg.solve(matrices.s, matrices.h @ psi, assume_a="her")
    density = np.einsum("n,in,jn->ij", weights, psi.conj(), psi)
    mixed = np.einsum("n,in,jn->ij", weights, psi.conj(), rate)
    g_row = np.real(density[None] * gradients.row_h - mixed[None] * gradients.row_s)
    g_col = np.real(density[None] * gradients.col_h - mixed[None] * gradients.col_s)
    onehot = geometry.roster.atom_matrix()
    dedx = onehot.T @ g_row.sum(axis=2).T + onehot.T @ g_col.sum(axis=1).T
    return -dedx


def forces(geometry: SystemGeometry, state: "ElectronState", assembler,
           t: float, repulsion: Optional[RepulsionTable] = None) -> np.ndarray:
    """Total force on every nucleus at time t, (n_atoms, 3).

    ``assembler`` must provide ``force_terms(geometry, t)`` returning the
    dressed matrices and their nuclear gradients at that geometry.
    """
    matrices, gradients = assembler.force_terms(geometry, t)
    total = electronic_force(geometry, state, matrices, gradients)
    if repulsion is not None and geometry.atom_count > 1:
        total = total - repulsion.gradient(geometry)
    return total


def half_kick(geometry: SystemGeometry, force: np.ndarray, dt: float) -> SystemGeometry:
    return geometry.with_velocities(geometry.velocities
                                    + 0.5 * dt * force / geometry.masses[:, None])


def drift(geometry: SystemGeometry, dt: float) -> SystemGeometry:
    return geometry.with_positions(geometry.positions + dt * geometry.velocities)


def verlet_step(geometry: SystemGeometry, forces_fn: Callable[[SystemGeometry], np.ndarray],
                dt_nuc: float, current_forces: Optional[np.ndarray] = None,
                on_drift: Optional[Callable[[SystemGeometry, SystemGeometry], None]] = None,
                min_distance: float = DEFAULT_MIN_DISTANCE) -> tuple[SystemGeometry, np.ndarray]:
    """Advance the nuclei by one velocity-Verlet step.

    Args:
        geometry: Geometry at the start of the step
        forces_fn: Force evaluation at a geometry
        dt_nuc: Nuclear time step
        current_forces: Forces at ``geometry`` if already known
        on_drift: Called with the half-kicked start geometry and the drifted
            geometry, before the closing force evaluation; the electronic
            substeps run here
        min_distance: Abort threshold for nuclear overlap

    Returns:
        (new geometry, forces at the new geometry)

    Raises:
        GeometryError: If two nuclei come closer than ``min_distance``
    """
    if current_forces is None:
        current_forces = forces_fn(geometry)
    kicked = half_kick(geometry, current_forces, dt_nuc)
    moved = drift(kicked, dt_nuc)
    moved.check_separation(min_distance)
    if on_drift is not None:
        on_drift(kicked, moved)
    new_forces = forces_fn(moved)
    return half_kick(moved, new_forces, dt_nuc), new_forces


def maxwell_boltzmann_velocities(masses: np.ndarray, temperature_k: float,
                                 rng: np.random.Generator) -> np.ndarray:
    """Thermal velocities with the centre-of-mass motion removed."""
    masses = np.asarray(masses, dtype=float)
    if temperature_k <= 0.0:
        return np.zeros((len(masses), 3))
    kt = BOLTZMANN_HARTREE_PER_K * temperature_k
    velocities = rng.normal(size=(len(masses), 3)) * np.sqrt(kt / masses)[:, None]
    if len(masses) > 1:
        velocities -= np.sum(masses[:, None] * velocities, axis=0) / np.sum(masses)
    return velocities
