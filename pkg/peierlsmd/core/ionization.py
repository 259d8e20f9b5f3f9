"""Single sink orbital absorbing bound amplitude while the field is on.

The sink couples to bound orbital l through the non-returning element
H_{sink,l} = alpha_l (e/mc) |A| p0_sink with H_{l,sink} = 0. Because the
row never feeds back, the bound block is propagated with the Markov
(golden-rule) limit of that row: every channel drains at

    Gamma_l = 2 pi |H_{sink,l}|^2 / eps_sink,   eps_sink = p0_sink^2 / 2m

through the Hermitian loss operator sum_l (Gamma_l / 2) (S e_l)(S e_l)^+.
The sink itself is an accounting register of the drained probability.
"""
import logging
from dataclasses import dataclass, replace
from typing import Sequence, Union

import numpy as np

from peierlsmd.core.coupling import MatrixSet
from peierlsmd.units import ELECTRON_MASS, ELEMENTARY_CHARGE, SPEED_OF_LIGHT

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SinkSpec:
    """Sink couplings.

    Attributes:
        alpha: Uniform coupling or one value per bound orbital
        p0_sink: Reference momentum (hbar / a0 = 1 in atomic units)
        enabled: Whether the sink is active
    """
    alpha: Union[float, tuple[float, ...]] = 0.0
    p0_sink: float = 1.0
    enabled: bool = True

    def __post_init__(self) -> None:
        if np.any(np.asarray(self.alpha) < 0.0):
            raise ValueError("sink couplings must be non-negative")
        if not self.p0_sink > 0.0:
            raise ValueError("sink reference momentum must be positive")

    @classmethod
    def from_config(cls, block) -> "SinkSpec":
        alpha = tuple(block.alpha) if isinstance(block.alpha, list) else block.alpha
        return cls(alpha=alpha, p0_sink=block.p0_sink, enabled=block.enabled)

    @property
    def sink_energy(self) -> float:
        return self.p0_sink ** 2 / (2.0 * ELECTRON_MASS)

    def couplings(self, size: int) -> np.ndarray:
        """Per-orbital alpha_l for a basis of ``size`` bound orbitals."""
        alpha = np.asarray(self.alpha, dtype=float)
        if alpha.ndim == 0:
            return np.full(size, float(alpha))
        if alpha.shape != (size,):
            raise ValueError(f"expected {size} sink couplings, got {alpha.shape[0]}")
        return alpha


def sink_row(sink: SinkSpec, abar: np.ndarray, size: int) -> np.ndarray:
    """H_{sink,l} = alpha_l (e / m c) |A| p0_sink for every bound orbital."""
    magnitude = float(np.linalg.norm(abar))
    scale = ELEMENTARY_CHARGE / (ELECTRON_MASS * SPEED_OF_LIGHT) * magnitude * sink.p0_sink
    return sink.couplings(size) * scale


def extend_matrices(matrices: MatrixSet, sink: SinkSpec, abar: np.ndarray) -> MatrixSet:
    """Append the sink orbital as the last row and column.

    S gains an identity block; H gains the coupling row with zero column
    and zero sink energy. The result is propagated with the general
    (non-Hermitian) step: amplitude flows into the sink and never back.
    """
    n = matrices.size
    s = np.zeros((n + 1, n + 1), dtype=complex)
    s[:n, :n] = matrices.s
    s[n, n] = 1.0
    h = np.zeros((n + 1, n + 1), dtype=complex)
    h[:n, :n] = matrices.h
    if sink.enabled:
        h[n, :n] = sink_row(sink, abar, n)
    return replace(matrices, s=s, h=h, mu=None, p=None, pp=None, h_el=None,
                   loss=None, sink_rates=None, explicit_sink=True)


def channel_rates(sink: SinkSpec, abar: np.ndarray, size: int) -> np.ndarray:
    """Golden-rule drain rate Gamma_l of every bound orbital."""
    row = sink_row(sink, abar, size)
    return 2.0 * np.pi * np.abs(row) ** 2 / sink.sink_energy


def loss_operator(s: np.ndarray, rates: np.ndarray) -> np.ndarray:
    """sum_l (Gamma_l / 2) (S e_l)(S e_l)^+ as a dense Hermitian matrix."""
    return (s.conj().T * (0.5 * rates)[None, :]) @ s


def attach_sink(matrices: MatrixSet, sink: SinkSpec, abar: np.ndarray) -> MatrixSet:
    """Attach the bound-block loss to dressed matrices."""
    if not sink.enabled:
        return matrices
    rates = channel_rates(sink, abar, matrices.size)
    return matrices.with_loss(loss_operator(matrices.s, rates), rates)


def sink_amplitudes(transferred: np.ndarray) -> np.ndarray:
    """Magnitude of the sink amplitude of every state, sqrt of its cumulative transfer."""
    return np.sqrt(np.clip(np.asarray(transferred).sum(axis=-1), 0.0, None))


def bound_norm_report(norms: Sequence[float], transferred: np.ndarray) -> np.ndarray:
    """Bound norm plus cumulative transfer per state; one when accounting closes."""
    return np.asarray(norms) + np.asarray(transferred).sum(axis=-1)
