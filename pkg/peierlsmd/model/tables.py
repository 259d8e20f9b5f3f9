"""Pair tables: species parameters and vectorized field-free matrices.

A :class:`PairTable` knows the orbitals of every species and turns an
ordered list of atoms into an :class:`OrbitalRoster`. For a set of nuclear
positions it assembles the dense field-free blocks S0, H0, mu0, p0 and
their derivatives with respect to the pair displacement in one batched
call to :class:`~peierlsmd.model.orbitals.GaussianPairs`.
"""
import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from peierlsmd.errors import ConfigurationError, NumericalError
from peierlsmd.model.orbitals import (
    CUTOFF_FACTOR,
    DEFAULT_HUECKEL_K,
    GaussianPairs,
    OrbitalSpec,
)
from peierlsmd.units import HBAR, Q_ELECTRON

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpeciesParams:
    """Orbitals and model constants of one species."""
    name: str
    orbitals: tuple[OrbitalSpec, ...]
    hueckel_k: float = DEFAULT_HUECKEL_K
    mass: float = 1.0


@dataclass(frozen=True, eq=False)
class OrbitalRoster:
    """Composite orbital index l <-> (atom, orbital) for one run.

    Attributes:
        orbitals: OrbitalSpec of every composite index
        atom_of: Atom index of every composite index, shape (N,)
        species: Species label of every atom
    """
    orbitals: tuple[OrbitalSpec, ...]
    atom_of: np.ndarray
    species: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.orbitals)

    @property
    def atom_count(self) -> int:
        return len(self.species)

    def centers(self, positions: np.ndarray) -> np.ndarray:
        """Orbital centres X_l, shape (N, 3)."""
        return np.asarray(positions, dtype=float)[self.atom_of]

    def atom_matrix(self) -> np.ndarray:
        """One-hot (N, n_atoms) map from orbitals to their atoms."""
        onehot = np.zeros((self.size, self.atom_count))
        onehot[np.arange(self.size), self.atom_of] = 1.0
        return onehot

    def labels(self) -> list[str]:
        return [f"{self.species[a]}{a}:{orb.kind}"
                for orb, a in zip(self.orbitals, self.atom_of)]


@dataclass
class FieldFreeBlocks:
    """Dense field-free matrices for one geometry.

    ``s0`` and ``h0`` are real symmetric (N, N); ``mu0`` and ``p0`` are
    complex (3, N, N) with the Cartesian component first.
    """
    s0: np.ndarray
    h0: np.ndarray
    mu0: np.ndarray
    p0: np.ndarray
    onsite: np.ndarray


@dataclass
class FieldFreeGradients:
    """Derivatives of the field-free blocks with respect to d = X' - X.

    Leading axis is the displacement component; ``dmu0``/``dp0`` carry
    (axis, component, N, N). On-site entries are zero.
    """
    ds0: np.ndarray
    dh0: np.ndarray
    dmu0: np.ndarray
    dp0: np.ndarray


@dataclass
class PairTable:
    """Field-free matrix elements for every species pair.

    Args:
        species: Species parameters keyed by label
        cutoff_factor: r_cut = cutoff_factor / sqrt(min alpha)
    """
    species: Mapping[str, SpeciesParams]
    cutoff_factor: float = CUTOFF_FACTOR

    def covers(self, labels: Sequence[str]) -> bool:
        return all(label in self.species for label in labels)

    def roster(self, atom_species: Sequence[str]) -> OrbitalRoster:
        """Build the orbital roster for an ordered list of atom species.

        Raises:
            ConfigurationError: If a species has no table entry
        """
        orbitals: list[OrbitalSpec] = []
        atom_of: list[int] = []
        for index, label in enumerate(atom_species):
            if label not in self.species:
                available = ", ".join(sorted(self.species))
                raise ConfigurationError(
                    f"Species '{label}' missing from pair tables. "
                    f"Available species: {available}",
                    field="geometry.atoms",
                )
            for orbital in self.species[label].orbitals:
                orbitals.append(orbital)
                atom_of.append(index)
        return OrbitalRoster(tuple(orbitals), np.asarray(atom_of, dtype=int),
                             tuple(atom_species))

    def hueckel_k(self, first: str, second: str) -> float:
        """Pair constant K, the mean of the two species' constants."""
        return 0.5 * (self.species[first].hueckel_k + self.species[second].hueckel_k)

    def cutoff(self, bra: OrbitalSpec, ket: OrbitalSpec) -> float:
        return self.cutoff_factor / np.sqrt(min(bra.alpha, ket.alpha))

    def masses(self, atom_species: Sequence[str]) -> np.ndarray:
        return np.array([self.species[label].mass for label in atom_species])

    def _pair_arrays(self, roster: OrbitalRoster, positions: np.ndarray):
        centers = roster.centers(positions)
        n = roster.size
        alphas = np.array([orb.alpha for orb in roster.orbitals])
        powers = np.array([orb.powers for orb in roster.orbitals], dtype=int)
        d = centers[:, None, :] - centers[None, :, :]
        if not np.all(np.isfinite(d)):
            raise ValueError("positions contain NaN or infinite components")
        rcut = self.cutoff_factor / np.sqrt(np.minimum(alphas[:, None], alphas[None, :]))
        onsite = roster.atom_of[:, None] == roster.atom_of[None, :]
        within = onsite | (np.einsum("ijk,ijk->ij", d, d) <= rcut ** 2)
        rows, cols = np.nonzero(within)
        pairs = GaussianPairs(powers[rows], powers[cols], alphas[rows], alphas[cols],
                              np.where(onsite[rows, cols, None], 0.0, d[rows, cols]))
        norms = np.array([orb.norm for orb in roster.orbitals])
        scale = norms[rows] * norms[cols]
        return n, onsite, rows, cols, pairs, scale

    def _pair_constants(self, roster: OrbitalRoster) -> np.ndarray:
        """K (eps' + eps) / 2 for every orbital pair, (N, N)."""
        eps = np.array([orb.epsilon for orb in roster.orbitals])
        k = np.array([self.species[roster.species[a]].hueckel_k for a in roster.atom_of])
        return 0.5 * (k[:, None] + k[None, :]) * 0.5 * (eps[:, None] + eps[None, :])

    def field_free(self, roster: OrbitalRoster, positions: np.ndarray) -> FieldFreeBlocks:
        """Assemble S0, H0, mu0 and p0 for the given nuclear positions."""
        n, onsite, rows, cols, pairs, scale = self._pair_arrays(roster, positions)
        s0 = np.zeros((n, n))
        s0[rows, cols] = scale * pairs.overlap()
        s0 = 0.5 * (s0 + s0.T)

        h0 = np.where(onsite, 0.0, self._pair_constants(roster) * s0)
        h0[np.diag_indices(n)] = [orb.epsilon for orb in roster.orbitals]

        parity = np.array([orb.parity for orb in roster.orbitals])
        # inversion parity: on-site odd integrands vanish identically
        parity_zero = onsite & (parity[:, None] == parity[None, :])

        mu0 = np.zeros((3, n, n), dtype=complex)
        mu0[:, rows, cols] = (Q_ELECTRON * scale * pairs.dipole().T)
        p0 = np.zeros((3, n, n), dtype=complex)
        p0[:, rows, cols] = 1j * HBAR * scale * pairs.ket_center_gradient().T
        mu0[:, parity_zero] = 0.0
        p0[:, parity_zero] = 0.0
        return FieldFreeBlocks(s0=s0, h0=h0, mu0=mu0, p0=p0, onsite=onsite)

    def gradients(self, roster: OrbitalRoster, positions: np.ndarray) -> FieldFreeGradients:
        """Displacement derivatives of the field-free blocks."""
        n, onsite, rows, cols, pairs, scale = self._pair_arrays(roster, positions)
        offsite = ~onsite[rows, cols]
        rows, cols, scale = rows[offsite], cols[offsite], scale[offsite]
        kcg = pairs.ket_center_gradient()[offsite]
        hess = pairs.ket_center_hessian()[offsite]
        dmom = pairs.dipole_displacement_gradient()[offsite]

        ds0 = np.zeros((3, n, n))
        # d/dd = -d/dB
        ds0[:, rows, cols] = -(scale[:, None] * kcg).T
        dh0 = self._pair_constants(roster)[None, :, :] * ds0
        dmu0 = np.zeros((3, 3, n, n), dtype=complex)
        dmu0[:, :, rows, cols] = Q_ELECTRON * np.moveaxis(scale[:, None, None] * dmom, 0, -1)
        dp0 = np.zeros((3, 3, n, n), dtype=complex)
        dp0[:, :, rows, cols] = -1j * HBAR * np.moveaxis(scale[:, None, None] * hess, 0, -1)
        return FieldFreeGradients(ds0=ds0, dh0=dh0, dmu0=dmu0, dp0=dp0)

    def check_positive_definite(self, s0: np.ndarray, tolerance: float = 1e-10) -> float:
        """Smallest eigenvalue of S0; raises NumericalError when not positive."""
        smallest = float(np.linalg.eigvalsh(s0)[0])
        if smallest <= tolerance:
            raise NumericalError(
                f"overlap matrix is not positive definite (smallest eigenvalue {smallest:.3e})",
                condition=smallest,
            )
        return smallest


def species_from_orbitals(name: str, orbitals: Sequence[OrbitalSpec],
                          hueckel_k: Optional[float] = None,
                          mass: float = 1.0) -> SpeciesParams:
    """Small helper for building species directly from orbital specs."""
    k = DEFAULT_HUECKEL_K if hueckel_k is None else hueckel_k
    return SpeciesParams(name=name, orbitals=tuple(orbitals), hueckel_k=k, mass=mass)
