"""Pytest configuration and shared fixtures."""
import os
import textwrap
from dataclasses import dataclass
from typing import Callable

import numpy as np
import pytest
from unittest.mock import patch

from peierlsmd.core.coupling import MatrixSet
from peierlsmd.core.nuclei import RepulsionSpec, RepulsionTable, SystemGeometry
from peierlsmd.model.factory import TableFactory

SPECIES = {
    "A": {"shells": [{"kind": "s", "alpha": 0.5, "epsilon": -0.5}],
          "hueckel_k": 1.75, "mass_amu": 1.008},
    "B": {"shells": [{"kind": "s", "alpha": 0.4, "epsilon": -0.3}],
          "hueckel_k": 1.75, "mass_amu": 2.016},
    "X": {"shells": [{"kind": "s", "alpha": 0.5, "epsilon": 0.0},
                     {"kind": "p", "alpha": 0.5, "epsilon": 0.1}],
          "hueckel_k": 1.75, "mass_amu": 12.0},
}

DIMER_BOND = 1.4
DIMER_REPULSION = RepulsionSpec(b=0.675, lam=1.5, cutoff=8.0)

SPECIES_TOML = """
[species.A]
mass_amu = 1.008
hueckel_k = 1.75
shells = [{kind = "s", alpha = 0.5, epsilon = -0.5}]

[species.X]
mass_amu = 12.0
shells = [{kind = "s", alpha = 0.5, epsilon = 0.0}, {kind = "p", alpha = 0.5, epsilon = 0.1}]
"""


@pytest.fixture
def mock_env():
    """Fixture to mock environment variables."""
    with patch.dict(os.environ, {}, clear=False):
        yield os.environ


@pytest.fixture
def tables():
    """Pair table covering the test species A, B and X."""
    return TableFactory.create(SPECIES)


def build_geometry(tables, species, positions, velocities=None) -> SystemGeometry:
    """Geometry of the given atoms with masses from the pair table."""
    positions = np.asarray(positions, dtype=float)
    velocities = np.zeros_like(positions) if velocities is None else np.asarray(velocities, dtype=float)
    return SystemGeometry(tuple(species), positions, velocities, tables.masses(species),
                          tables.roster(species))


@pytest.fixture
def make_geometry(tables) -> Callable[..., SystemGeometry]:
    """Factory fixture for geometries built on the shared pair table."""
    def make(species, positions, velocities=None) -> SystemGeometry:
        return build_geometry(tables, species, positions, velocities)
    return make


@pytest.fixture
def dimer(make_geometry):
    """Homonuclear A2 dimer along z at rest."""
    return make_geometry(["A", "A"], [[0.0, 0.0, 0.0], [0.0, 0.0, DIMER_BOND]])


@pytest.fixture
def hetero_dimer(make_geometry):
    """AB dimer along z at rest."""
    return make_geometry(["A", "B"], [[0.0, 0.0, 0.0], [0.0, 0.0, 1.6]])


@pytest.fixture
def atom_x(make_geometry):
    """Isolated X atom with one s and three p orbitals."""
    return make_geometry(["X"], [[0.0, 0.0, 0.0]])


@pytest.fixture
def triatomic(make_geometry):
    """Bent A-X-B molecule with small velocities."""
    positions = [[0.0, 0.0, 0.0], [0.3, 0.1, 1.5], [1.6, -0.2, 2.1]]
    velocities = [[1e-3, -2e-4, 5e-4], [-3e-4, 4e-4, -1e-4], [2e-4, 1e-4, -6e-4]]
    return make_geometry(["A", "X", "B"], positions, velocities)


@pytest.fixture
def dimer_repulsion():
    """Pair repulsion for A-A."""
    return RepulsionTable({frozenset(("A",)): DIMER_REPULSION})


@dataclass
class TwoLevelModel:
    """Synthetic assembler: H(t) given as a callable, unit overlap."""
    hamiltonian: Callable[[float], np.ndarray]

    def matrices(self, t: float) -> MatrixSet:
        h = np.asarray(self.hamiltonian(t), dtype=complex)
        return MatrixSet(s=np.eye(h.shape[0], dtype=complex), h=h, t=t)


@pytest.fixture
def rabi_model():
    """Resonantly driven two-level system, returns (model, rabi frequency)."""
    omega0, field, dipole = 0.1, 0.002, 0.707

    def hamiltonian(t: float) -> np.ndarray:
        coupling = -field * np.cos(omega0 * t) * dipole
        return np.array([[0.0, coupling], [coupling, omega0]])

    return TwoLevelModel(hamiltonian), field * dipole


def landau_zener_matrices(x: float, gap: float = 0.01, slope: float = 1.0):
    """Diabatic crossing H = [[a x / 2, gap / 2], [gap / 2, -a x / 2]] and its x-derivative."""
    h = np.array([[0.5 * slope * x, 0.5 * gap], [0.5 * gap, -0.5 * slope * x]])
    dh = np.array([[[0.5 * slope, 0.0], [0.0, -0.5 * slope]]])
    return h, np.eye(2), dh, np.zeros((1, 2, 2))


@pytest.fixture
def write_config(tmp_path) -> Callable[[str, str], "os.PathLike"]:
    """Write dedented TOML text to a file under tmp_path and return its path."""
    def write(text: str, name: str = "run.toml"):
        path = tmp_path / name
        path.write_text(textwrap.dedent(text), encoding="utf-8")
        return path
    return write


FROZEN_DIMER_CONFIG = """
[species.A]
mass_amu = 1.008
shells = [{kind = "s", alpha = 0.5, epsilon = -0.5}]

[geometry]
frozen = true
atoms = [
    {species = "A", x = 0.0, y = 0.0, z = 0.0},
    {species = "A", x = 0.0, y = 0.0, z = 1.4},
]

[pulse]
amplitude = 0.5
omega_au = 0.735
envelope = "sin2"
tau_fs = 2.0
t0_fs = 1.0

[integrator]
dt_as = 10.0
ratio = 5
t_end_fs = 3.0

[electrons]
states = [0]
occupations = [1.0]

[output]
path = "out/trajectory.ndjson"
checkpoint_dir = "out/checkpoints"
"""

MOVING_DIMER_CONFIG = """
[species.A]
mass_amu = 1.008
shells = [{kind = "s", alpha = 0.5, epsilon = -0.5}]

[[repulsion]]
species = ["A", "A"]
b = 0.675
lambda = 1.5
cutoff = 8.0

[geometry]
atoms = [
    {species = "A", x = 0.0, y = 0.0, z = 0.0},
    {species = "A", x = 0.0, y = 0.0, z = 1.5},
]

[integrator]
dt_as = 2.0
ratio = 10
t_end_fs = 2.0
output_stride = 5

[branching]
enabled = false

[output]
path = "moving.ndjson"
checkpoint_dir = "ckpt"
checkpoint_stride = 20
"""

ISOLATED_ATOM_CONFIG = """
[species.X]
mass_amu = 12.0
shells = [{kind = "s", alpha = 0.5, epsilon = 0.0}, {kind = "p", alpha = 0.5, epsilon = 0.1}]

[geometry]
frozen = true
atoms = [{species = "X", x = 0.0, y = 0.0, z = 0.0}]

[pulse]
amplitude = 3.0
omega_au = 0.1
envelope = "sin2"
tau_fs = 5.0
t0_fs = 2.5

[coupling]
mode = "{mode}"

[integrator]
dt_as = 20.0
ratio = 1
t_end_fs = 6.0
output_stride = 10

[electrons]
states = [0]
occupations = [1.0]

[branching]
enabled = false

[output]
path = "atom-{mode}.ndjson"
"""


@pytest.fixture
def two_level():
    """The synthetic unit-overlap assembler class."""
    return TwoLevelModel


@pytest.fixture
def landau_zener():
    """Callable x -> (H, S, dH/dx, dS/dx) of a diabatic crossing."""
    return landau_zener_matrices


@pytest.fixture
def frozen_dimer_config(write_config):
    """Frozen A2 dimer under a short resonant pulse, branching on."""
    return write_config(FROZEN_DIMER_CONFIG)


@pytest.fixture
def moving_dimer_config(write_config):
    """Field-free A2 dimer slightly off equilibrium, periodic checkpoints."""
    return write_config(MOVING_DIMER_CONFIG)


@pytest.fixture
def isolated_atom_config(write_config):
    """Factory: isolated X atom under a resonant pulse in the given coupling mode."""
    def make(mode: str):
        return write_config(ISOLATED_ATOM_CONFIG.replace("{mode}", mode), f"atom-{mode}.toml")
    return make


@pytest.fixture
def species_file(tmp_path):
    """Species parameter file for A and X."""
    path = tmp_path / "species.toml"
    path.write_text(SPECIES_TOML, encoding="utf-8")
    return path
