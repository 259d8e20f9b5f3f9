"""Analytic Cartesian Gaussian orbitals and their field-free matrix elements.

Every orbital is a single normalized Cartesian Gaussian

    phi(r) = N x^lx y^ly z^lz exp(-alpha r^2),   lx + ly + lz <= 1,

so overlaps, dipoles, momenta and all of their derivatives with respect to
the centres follow from the one-dimensional Obara-Saika recursion. The
displacement argument ``d`` is always ``X' - X``: bra centre minus ket
centre. Functions here are pure and thread-safe.
"""
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from peierlsmd.units import HBAR, Q_ELECTRON

SHELL_POWERS = {
    "s": (0, 0, 0),
    "px": (1, 0, 0),
    "py": (0, 1, 0),
    "pz": (0, 0, 1),
}

DEFAULT_HUECKEL_K = 1.75
# Gaussian decay past 10/sqrt(alpha_min) leaves < 1e-10 of every element
CUTOFF_FACTOR = 10.0
# bra powers reach 1, ket powers reach 1 + 2 (dipole/momentum derivatives)
_IMAX = 1
_JMAX = 3


@dataclass(frozen=True)
class OrbitalSpec:
    """A single normalized Cartesian Gaussian orbital.

    Attributes:
        species: Species label the orbital belongs to
        kind: One of 's', 'px', 'py', 'pz'
        alpha: Gaussian exponent in bohr^-2
        epsilon: On-site energy in hartree
    """
    species: str
    kind: str
    alpha: float
    epsilon: float

    def __post_init__(self) -> None:
        if self.kind not in SHELL_POWERS:
            raise ValueError(f"Unsupported orbital kind: '{self.kind}'")
        if not self.alpha > 0.0:
            raise ValueError(f"Gaussian exponent must be positive, got {self.alpha}")
        if not np.isfinite(self.epsilon):
            raise ValueError("On-site energy must be finite")

    @property
    def powers(self) -> tuple[int, int, int]:
        """Cartesian powers (lx, ly, lz)."""
        return SHELL_POWERS[self.kind]

    @property
    def parity(self) -> int:
        """+1 for even (s), -1 for odd (p) under inversion."""
        return -1 if sum(self.powers) % 2 else 1

    @cached_property
    def norm(self) -> float:
        """Normalization constant making the self-overlap exactly one."""
        base = (2.0 * self.alpha / np.pi) ** 0.75
        if sum(self.powers) == 0:
            return base
        return base * 2.0 * np.sqrt(self.alpha)


def cutoff_radius(bra: OrbitalSpec, ket: OrbitalSpec) -> float:
    """Validity radius of the two-centre elements of a pair."""
    return CUTOFF_FACTOR / np.sqrt(min(bra.alpha, ket.alpha))


class GaussianPairs:
    """Primitive integrals for a batch of P (bra, ket) orbital pairs.

    Args:
        la, lb: Cartesian powers of bra and ket, integer arrays (P, 3)
        a, b: Bra and ket exponents, arrays (P,)
        d: Displacements X' - X, array (P, 3)

    ``prim(m)`` is <bra| (x-B)^m exp(-b(x-B)^2)> without normalization;
    ``dprim``/``d2prim`` differentiate it with respect to the ket centre B.
    """

    def __init__(self, la: np.ndarray, lb: np.ndarray, a: np.ndarray,
                 b: np.ndarray, d: np.ndarray) -> None:
        self.la = np.asarray(la, dtype=int)
        self.lb = np.asarray(lb, dtype=int)
        self.b = np.asarray(b, dtype=float)
        self.count = len(self.b)
        self._rows = np.arange(self.count)[:, None]
        self._axes = np.arange(3)[None, :]
        self.tables = self._overlap_tables(np.asarray(a, dtype=float), self.b,
                                           np.asarray(d, dtype=float))

    @staticmethod
    def _overlap_tables(a: np.ndarray, b: np.ndarray, d: np.ndarray) -> np.ndarray:
        """1D Obara-Saika tables, shape (P, 3, _IMAX+1, _JMAX+1)."""
        p = (a + b)[:, None]
        half_p = 0.5 / p
        pa = -b[:, None] * d / p
        pb = a[:, None] * d / p
        s = np.zeros(d.shape + (_IMAX + 1, _JMAX + 1))
        s[..., 0, 0] = np.sqrt(np.pi / p) * np.exp(-(a * b)[:, None] / p * d * d)
        for i in range(_IMAX):
            s[..., i + 1, 0] = pa * s[..., i, 0]
            if i:
                s[..., i + 1, 0] += half_p * i * s[..., i - 1, 0]
        for i in range(_IMAX + 1):
            for j in range(_JMAX):
                value = pb * s[..., i, j]
                if i:
                    value = value + half_p * i * s[..., i - 1, j]
                if j:
                    value = value + half_p * j * s[..., i, j - 1]
                s[..., i, j + 1] = value
        return s

    def prim(self, m: np.ndarray) -> np.ndarray:
        valid = np.all(m >= 0, axis=1)
        factors = self.tables[self._rows, self._axes, self.la, np.clip(m, 0, _JMAX)]
        return np.where(valid, np.prod(factors, axis=1), 0.0)

    def dprim(self, m: np.ndarray, axis: int) -> np.ndarray:
        step = np.zeros(3, dtype=int)
        step[axis] = 1
        return -m[:, axis] * self.prim(m - step) + 2.0 * self.b * self.prim(m + step)

    def d2prim(self, m: np.ndarray, ax1: int, ax2: int) -> np.ndarray:
        step = np.zeros(3, dtype=int)
        step[ax1] = 1
        return (-m[:, ax1] * self.dprim(m - step, ax2)
                + 2.0 * self.b * self.dprim(m + step, ax2))

    def raised(self, axis: int) -> np.ndarray:
        m = self.lb.copy()
        m[:, axis] += 1
        return m

    def overlap(self) -> np.ndarray:
        """S0 for every pair, unnormalized, shape (P,)."""
        return self.prim(self.lb)

    def dipole(self) -> np.ndarray:
        """Moment about the ket centre, unnormalized and uncharged, (P, 3)."""
        return np.stack([self.prim(self.raised(k)) for k in range(3)], axis=1)

    def ket_center_gradient(self) -> np.ndarray:
        """dS0/dB for every pair, unnormalized, (P, 3)."""
        return np.stack([self.dprim(self.lb, k) for k in range(3)], axis=1)

    def dipole_displacement_gradient(self) -> np.ndarray:
        """d(moment_k)/d(d_axis), unnormalized, (P, axis, k)."""
        # d/dd = -d/dB
        return -np.stack([
            np.stack([self.dprim(self.raised(k), axis) for k in range(3)], axis=1)
            for axis in range(3)], axis=1)

    def ket_center_hessian(self) -> np.ndarray:
        """d2 S0 / dB_axis dB_k, unnormalized, (P, axis, k)."""
        return np.stack([
            np.stack([self.d2prim(self.lb, k, axis) for k in range(3)], axis=1)
            for axis in range(3)], axis=1)


def _check_displacement(d: Sequence[float]) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if d.shape != (3,):
        raise ValueError(f"displacement must be a 3-vector, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise ValueError("displacement contains NaN or infinite components")
    return d


def _single_pair(bra: OrbitalSpec, ket: OrbitalSpec, d: np.ndarray) -> GaussianPairs:
    return GaussianPairs([bra.powers], [ket.powers], [bra.alpha], [ket.alpha], d[None, :])


def _is_onsite(d: np.ndarray) -> bool:
    return not np.any(d)


def _beyond_cutoff(bra: OrbitalSpec, ket: OrbitalSpec, d: np.ndarray) -> bool:
    return float(np.dot(d, d)) > cutoff_radius(bra, ket) ** 2


def overlap_s0(bra: OrbitalSpec, ket: OrbitalSpec, d: Sequence[float]) -> float:
    """Field-free overlap S0 = <phi_bra(x - X')|phi_ket(x - X)>, d = X' - X."""
    d = _check_displacement(d)
    if _beyond_cutoff(bra, ket, d):
        return 0.0
    return float(bra.norm * ket.norm * _single_pair(bra, ket, d).overlap()[0])


def dipole_mu0(bra: OrbitalSpec, ket: OrbitalSpec, d: Sequence[float]) -> np.ndarray:
    """Dipole q <phi_bra| (x - X) |phi_ket>, moment taken about the ket centre.

    Not symmetric under bra/ket exchange; both orderings must be stored.
    """
    d = _check_displacement(d)
    if _beyond_cutoff(bra, ket, d):
        return np.zeros(3, dtype=complex)
    if _is_onsite(d) and bra.parity == ket.parity:
        return np.zeros(3, dtype=complex)
    moment = _single_pair(bra, ket, d).dipole()[0]
    return (Q_ELECTRON * bra.norm * ket.norm * moment).astype(complex)


def overlap_gradient(bra: OrbitalSpec, ket: OrbitalSpec,
                     d: Sequence[float]) -> np.ndarray:
    """dS0/dX: derivative of the overlap with respect to the ket centre X."""
    d = _check_displacement(d)
    if _beyond_cutoff(bra, ket, d):
        return np.zeros(3)
    return bra.norm * ket.norm * _single_pair(bra, ket, d).ket_center_gradient()[0]


def momentum_p0(bra: OrbitalSpec, ket: OrbitalSpec, d: Sequence[float]) -> np.ndarray:
    """Momentum matrix element <phi_bra| -i hbar grad |phi_ket>.

    Off-site it is i hbar dS0/dX (derivative with respect to the ket
    centre); on-site the gradient acts on the ket directly, with the
    inversion-parity zeros enforced exactly.
    """
    d = _check_displacement(d)
    if _is_onsite(d):
        if bra.parity == ket.parity:
            return np.zeros(3, dtype=complex)
        # grad on the ket is minus the derivative with respect to its centre
        grad = -bra.norm * ket.norm * _single_pair(bra, ket, d).ket_center_gradient()[0]
        return -1j * HBAR * grad
    return 1j * HBAR * overlap_gradient(bra, ket, d)


def hamiltonian_h0(bra: OrbitalSpec, ket: OrbitalSpec, d: Sequence[float],
                   hueckel_k: float = DEFAULT_HUECKEL_K) -> float:
    """Extended-Hueckel field-free Hamiltonian element.

    On-site: epsilon for the same orbital, zero between different orbitals.
    Off-site: K S0(d) (eps' + eps) / 2.
    """
    d = _check_displacement(d)
    if _is_onsite(d):
        return bra.epsilon if bra == ket else 0.0
    return hueckel_k * overlap_s0(bra, ket, d) * 0.5 * (bra.epsilon + ket.epsilon)
