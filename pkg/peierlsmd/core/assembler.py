"""Coupling context: dressed matrices along the current nuclear path."""
import logging
from collections import OrderedDict
from typing import Optional

import numpy as np

from peierlsmd.core.coupling import (
    CouplingFlags,
    MatrixGradients,
    MatrixSet,
    assemble,
    dressing_angles,
    matrix_gradients,
)
from peierlsmd.core.field import PulseSpec, a_bar, e_bar
from peierlsmd.core.ionization import SinkSpec, attach_sink
from peierlsmd.core.nuclei import SystemGeometry
from peierlsmd.model.tables import FieldFreeBlocks, PairTable

logger = logging.getLogger(__name__)


class CouplingAssembler:
    """Assembles MatrixSets at any time of the current nuclear step.

    Between calls to :meth:`move` the nuclei follow the straight line
    X(t) = X + Xdot (t - t_anchor) with constant Xdot, which is the drift
    of a velocity-Verlet step.
    """

    def __init__(self, tables: PairTable, geometry: SystemGeometry,
                 pulse: Optional[PulseSpec] = None,
                 flags: CouplingFlags = CouplingFlags(),
                 sink: Optional[SinkSpec] = None,
                 cache_size: int = 4) -> None:
        self.tables = tables
        self.pulse = pulse
        self.flags = flags
        self.sink = sink if sink is not None and sink.enabled else None
        self.cache_size = cache_size
        self.geometry = geometry
        self.anchor_time = 0.0
        self._blocks: OrderedDict[bytes, FieldFreeBlocks] = OrderedDict()
        self._matrices: OrderedDict[float, MatrixSet] = OrderedDict()

    def move(self, geometry: SystemGeometry, t: float) -> None:
        """Anchor the straight-line path at ``geometry`` and time ``t``."""
        self.geometry = geometry
        self.anchor_time = t
        self._matrices.clear()

    def geometry_at(self, t: float) -> SystemGeometry:
        if not np.any(self.geometry.velocities):
            return self.geometry
        return self.geometry.with_positions(
            self.geometry.positions + (t - self.anchor_time) * self.geometry.velocities)

    def field(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        if self.pulse is None:
            return np.zeros(3), np.zeros(3)
        return a_bar(self.pulse, t), e_bar(self.pulse, t)

    def blocks(self, geometry: SystemGeometry) -> FieldFreeBlocks:
        """Field-free blocks at a geometry, cached by position."""
        key = np.ascontiguousarray(geometry.positions).tobytes()
        if key in self._blocks:
            self._blocks.move_to_end(key)
            return self._blocks[key]
        blocks = self.tables.field_free(geometry.roster, geometry.positions)
        self.tables.check_positive_definite(blocks.s0)
        self._blocks[key] = blocks
        if len(self._blocks) > self.cache_size:
            self._blocks.popitem(last=False)
        return blocks

    def matrices_for(self, geometry: SystemGeometry, t: float) -> MatrixSet:
        abar, ebar = self.field(t)
        matrices = assemble(geometry, self.tables, abar, ebar, flags=self.flags, t=t,
                            blocks=self.blocks(geometry))
        if self.sink is not None:
            matrices = attach_sink(matrices, self.sink, abar)
        return matrices

    def matrices(self, t: float) -> MatrixSet:
        """Dressed matrices at time t on the current path."""
        if t in self._matrices:
            self._matrices.move_to_end(t)
            return self._matrices[t]
        matrices = self.matrices_for(self.geometry_at(t), t)
        self._matrices[t] = matrices
        if len(self._matrices) > self.cache_size:
            self._matrices.popitem(last=False)
        return matrices

    def force_terms(self, geometry: SystemGeometry, t: float) -> tuple[MatrixSet, MatrixGradients]:
        """Matrices and their nuclear gradients at an explicit geometry."""
        abar, ebar = self.field(t)
        blocks = self.blocks(geometry)
        matrices = assemble(geometry, self.tables, abar, ebar, flags=self.flags, t=t,
                            blocks=blocks)
        grads = self.tables.gradients(geometry.roster, geometry.positions)
        return matrices, matrix_gradients(geometry, matrices, blocks, grads, abar, ebar)

    def dressing(self, t: float, geometry: Optional[SystemGeometry] = None) -> np.ndarray:
        """Phases D_l relating the field-free and dressed bases, psi = D c."""
        geometry = self.geometry_at(t) if geometry is None else geometry
        abar, _ = self.field(t)
        return np.exp(1j * dressing_angles(geometry, abar, flags=self.flags))

    def electronic_energy(self, state, t: float) -> float:
        """sum_n f_n Re(psi_n^+ H_el psi_n) / (psi_n^+ S psi_n)."""
        matrices = self.matrices(t)
        psi = state.coefficients
        expect = np.real(np.einsum("in,ij,jn->n", psi.conj(), matrices.h_el, psi))
        norms = state.norms(matrices.s)
        return float(np.sum(state.occupations * expect / np.where(norms > 0.0, norms, 1.0)))
