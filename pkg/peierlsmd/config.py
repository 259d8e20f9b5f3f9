"""Run configuration schema and TOML loading.

Configuration files are TOML. Every block is a strict pydantic model
(unknown keys are errors) and every validation failure is re-raised as
:class:`~peierlsmd.errors.ConfigurationError` naming the dotted field path
and, when it can be found in the source text, the line.
"""
import logging
import re

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from itertools import combinations_with_replacement
from pathlib import Path
from typing import Any, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from peierlsmd.errors import ConfigurationError, SchemaVersionError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

Vector3 = tuple[float, float, float]


class StrictModel(BaseModel):
    """Base for every configuration block."""
    model_config = ConfigDict(extra="forbid", frozen=True)


class ShellConfig(StrictModel):
    """One shell of a species: kind, Gaussian exponent, on-site energy (hartree)."""
    kind: Literal["s", "p"]
    alpha: float
    epsilon: float

    @field_validator("alpha")
    @classmethod
    def positive_exponent(cls, value: float) -> float:
        if not value > 0.0:
            raise ValueError("Gaussian exponent must be positive")
        return value


class SpeciesConfig(StrictModel):
    """Species block: shells, Hueckel constant and nuclear mass (amu)."""
    shells: list[ShellConfig] = Field(min_length=1)
    hueckel_k: float = 1.75
    mass_amu: float = 1.0

    @field_validator("mass_amu")
    @classmethod
    def positive_mass(cls, value: float) -> float:
        if not value > 0.0:
            raise ValueError("mass must be positive")
        return value


class SpeciesFile(StrictModel):
    """Top level of a species parameter file."""
    schema_version: int = SCHEMA_VERSION
    species: dict[str, SpeciesConfig] = Field(min_length=1)


class AtomConfig(StrictModel):
    species: str
    x: float
    y: float
    z: float
    vx: float = 0.0
    vy: float = 0.0
    vz: float = 0.0


class GeometryConfig(StrictModel):
    """Nuclear geometry. Positions in ``units``; velocities always in bohr per a.u. time."""
    units: Literal["bohr", "angstrom"] = "bohr"
    atoms: list[AtomConfig] = Field(min_length=1)
    frozen: bool = False
    temperature_k: float = 0.0

    @field_validator("temperature_k")
    @classmethod
    def non_negative_temperature(cls, value: float) -> float:
        if value < 0.0:
            raise ValueError("temperature must be non-negative")
        return value


class PulseConfig(StrictModel):
    """Applied pulse. Give exactly one of amplitude/intensity_wcm2 and of omega_ev/omega_au."""
    amplitude: Optional[float] = None
    intensity_wcm2: Optional[float] = None
    omega_ev: Optional[float] = None
    omega_au: Optional[float] = None
    envelope: Literal["gaussian", "sin2", "constant"] = "sin2"
    tau_fs: float = 10.0
    phase: float = 0.0
    polarization: Vector3 = (0.0, 0.0, 1.0)
    t0_fs: float = 0.0
    delta_a: Vector3 = (0.0, 0.0, 0.0)

    @field_validator("tau_fs")
    @classmethod
    def positive_duration(cls, value: float) -> float:
        if not value > 0.0:
            raise ValueError("envelope duration must be positive")
        return value

    @field_validator("polarization")
    @classmethod
    def unit_polarization(cls, value: Vector3) -> Vector3:
        norm = float(np.linalg.norm(value))
        if norm == 0.0:
            raise ValueError("polarization must be a non-zero vector")
        return tuple(float(v) / norm for v in value)

    @model_validator(mode="after")
    def one_of_each(self) -> "PulseConfig":
        if (self.amplitude is None) == (self.intensity_wcm2 is None):
            raise ValueError("give exactly one of 'amplitude' or 'intensity_wcm2'")
        if (self.omega_ev is None) == (self.omega_au is None):
            raise ValueError("give exactly one of 'omega_ev' or 'omega_au'")
        if self.intensity_wcm2 is not None and self.intensity_wcm2 < 0.0:
            raise ValueError("intensity must be non-negative")
        return self


class CouplingConfig(StrictModel):
    mode: Literal["full", "peierls_only", "generalized_peierls"] = "full"
    dipole: bool = True
    velocity_term: bool = True
    velocity_atom: Literal["ket", "average"] = "ket"
    dipole_onsite_only: bool = False


class IntegratorConfig(StrictModel):
    """Time stepping. Strides count nuclear steps."""
    dt_as: float = 0.5
    ratio: int = 10
    t_end_fs: float
    output_stride: int = 1
    analysis_stride: int = 1

    @field_validator("dt_as", "t_end_fs")
    @classmethod
    def positive_time(cls, value: float) -> float:
        if not value > 0.0:
            raise ValueError("must be positive")
        return value

    @field_validator("ratio", "output_stride", "analysis_stride")
    @classmethod
    def positive_count(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be at least 1")
        return value


class ElectronsConfig(StrictModel):
    """Initial occupied states: adiabatic indices and occupations f_n in {0, 1, 2}."""
    states: list[int] = Field(default_factory=lambda: [0], min_length=1)
    occupations: list[float] = Field(default_factory=lambda: [2.0], min_length=1)

    @model_validator(mode="after")
    def matching_lengths(self) -> "ElectronsConfig":
        if len(self.states) != len(self.occupations):
            raise ValueError("'states' and 'occupations' must have the same length")
        if len(set(self.states)) != len(self.states):
            raise ValueError("initial states must be distinct")
        if any(f not in (0.0, 1.0, 2.0) for f in self.occupations):
            raise ValueError("occupations must be 0, 1 or 2")
        if any(i < 0 for i in self.states):
            raise ValueError("state indices must be non-negative")
        return self


class AdiabaticConfig(StrictModel):
    theta: float = 0.1
    degeneracy_tol: float = 1e-8
    criterion: Literal["massey", "literal"] = "massey"
    representative_mass_amu: Optional[float] = None


class BranchingConfig(StrictModel):
    enabled: bool = True
    policy: Literal["argmax", "sampled", "fixed"] = "argmax"
    fixed_index: Optional[int] = None
    seed: int = 0
    delta_pop: float = 0.01
    threshold: float = 0.05
    manual_times_fs: list[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def fixed_needs_index(self) -> "BranchingConfig":
        if self.policy == "fixed" and self.fixed_index is None:
            raise ValueError("policy 'fixed' requires 'fixed_index'")
        return self


class IonizationConfig(StrictModel):
    """Sink orbital: uniform or per-orbital coupling alpha, reference momentum p0."""
    enabled: bool = False
    alpha: Union[float, list[float]] = 0.0
    p0_sink: float = 1.0

    @field_validator("alpha")
    @classmethod
    def non_negative_alpha(cls, value):
        values = value if isinstance(value, list) else [value]
        if any(a < 0.0 for a in values):
            raise ValueError("sink couplings must be non-negative")
        return value


class RepulsionConfig(StrictModel):
    """Pair repulsion B exp(-lambda r), shifted to vanish with its slope at ``cutoff``."""
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    species: tuple[str, str]
    b: float
    lam: float = Field(alias="lambda")
    cutoff: float = 10.0

    @model_validator(mode="after")
    def physical(self) -> "RepulsionConfig":
        if self.b < 0.0 or self.lam <= 0.0 or self.cutoff <= 0.0:
            raise ValueError("repulsion needs b >= 0, lambda > 0, cutoff > 0")
        return self


class OutputConfig(StrictModel):
    path: str = "trajectory.ndjson"
    format: Literal["ndjson", "npz"] = "ndjson"
    checkpoint_dir: str = "checkpoints"
    checkpoint_stride: int = 0


class TolerancesConfig(StrictModel):
    """Every numerical tolerance used by the run."""
    step_norm_drift: float = 1e-6
    max_halvings: int = 8
    refinement_iterations: int = 3
    refinement_tol: float = 1e-12
    norm_band: float = 1e-8
    population_sum: float = 1e-8
    empty_branch: float = 1e-12
    min_distance: float = 0.1
    orthonormality: float = 1e-10


class RunConfig(StrictModel):
    """Complete run configuration."""
    schema_version: int = SCHEMA_VERSION
    species: Optional[dict[str, SpeciesConfig]] = None
    species_file: Optional[str] = None
    geometry: GeometryConfig
    pulse: Optional[PulseConfig] = None
    coupling: CouplingConfig = CouplingConfig()
    integrator: IntegratorConfig
    electrons: ElectronsConfig = ElectronsConfig()
    adiabatic: AdiabaticConfig = AdiabaticConfig()
    branching: BranchingConfig = BranchingConfig()
    ionization: IonizationConfig = IonizationConfig()
    repulsion: list[RepulsionConfig] = Field(default_factory=list)
    output: OutputConfig = OutputConfig()
    tolerances: TolerancesConfig = TolerancesConfig()

    @model_validator(mode="after")
    def cross_checks(self) -> "RunConfig":
        if self.species is not None and self.species_file is not None:
            raise ValueError("give either 'species' or 'species_file', not both")
        if self.species is not None:
            missing = {atom.species for atom in self.geometry.atoms} - set(self.species)
            if missing:
                raise ValueError(f"undefined species: {', '.join(sorted(missing))}")
        if not self.geometry.frozen and len(self.geometry.atoms) > 1:
            labels = sorted({atom.species for atom in self.geometry.atoms})
            defined = {frozenset(r.species) for r in self.repulsion}
            for pair in combinations_with_replacement(labels, 2):
                if frozenset(pair) not in defined:
                    raise ValueError(
                        f"missing repulsion parameters for species pair {pair[0]}-{pair[1]}"
                    )
        return self


_LOCATION = re.compile(r"\(at line (\d+)")


def locate_key(text: str, loc: tuple[Any, ...]) -> Optional[int]:
    """Best-effort 1-based line of the last named key of a location."""
    names = [str(part) for part in loc if isinstance(part, str)]
    if not names:
        return None
    key = re.escape(names[-1])
    patterns = [rf"^\s*{key}\s*=", rf"^\s*\[+\s*([\w.]+\.)?{key}\s*\]+"]
    for number, line in enumerate(text.splitlines(), start=1):
        if any(re.search(p, line) for p in patterns):
            return number
    return None


def _parse(text: str, source: str) -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        match = _LOCATION.search(str(exc))
        raise ConfigurationError(f"{source}: invalid TOML: {exc}",
                                 line=int(match.group(1)) if match else None) from exc


def _validate(model: type[BaseModel], data: dict, text: str, source: str):
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{source}: unsupported schema_version {version} (expected {SCHEMA_VERSION})",
            field="schema_version",
            line=locate_key(text, ("schema_version",)),
        )
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        error = exc.errors()[0]
        loc = tuple(error["loc"])
        path = ".".join(str(part) for part in loc) or "<root>"
        raise ConfigurationError(
            f"{source}: {error['msg']}", field=path, line=locate_key(text, loc)
        ) from exc


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Validate configuration text without resolving external files."""
    return _validate(RunConfig, _parse(text, source), text, source)


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Read and validate a run configuration file.

    Raises:
        ConfigurationError: If the file is missing, malformed or invalid
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    config = parse_run_config(text, str(path))
    logger.debug("Loaded run config %s", path)
    return config


def load_species_file(path: Union[str, Path]) -> SpeciesFile:
    """Read and validate a species parameter file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read species file {path}: {exc}",
                                 field="species_file") from exc
    return _validate(SpeciesFile, _parse(text, str(path)), text, str(path))
