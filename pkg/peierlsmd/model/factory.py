"""Table factory for building pair tables from species parameters."""
import logging
import os
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from peierlsmd.config import SpeciesConfig, load_species_file
from peierlsmd.errors import ConfigurationError
from peierlsmd.model.orbitals import CUTOFF_FACTOR, OrbitalSpec
from peierlsmd.model.tables import PairTable, SpeciesParams
from peierlsmd.units import amu_to_au

logger = logging.getLogger(__name__)


class TableFactory:
    """Factory for creating PairTable instances."""

    # Map of shell kinds to the Cartesian orbitals they expand into
    SHELL_KINDS = {
        "s": ("s",),
        "p": ("px", "py", "pz"),
    }

    # Environment variable naming the species file used when a config gives none
    SPECIES_FILE_ENV_VAR = "PEIERLSMD_SPECIES_FILE"

    @classmethod
    def expand_shell(cls, species: str, kind: str, alpha: float,
                     epsilon: float) -> list[OrbitalSpec]:
        """Expand one shell into its Cartesian orbitals.

        Raises:
            ValueError: If the shell kind is not supported
        """
        kind = kind.lower()
        if kind not in cls.SHELL_KINDS:
            available = ", ".join(cls.SHELL_KINDS.keys())
            raise ValueError(
                f"Unsupported shell kind: '{kind}'. "
                f"Available shell kinds: {available}"
            )
        return [OrbitalSpec(species, orbital, alpha, epsilon)
                for orbital in cls.SHELL_KINDS[kind]]

    @classmethod
    def create(
        cls,
        species: Mapping[str, Union[SpeciesConfig, Mapping[str, Any]]],
        cutoff_factor: float = CUTOFF_FACTOR,
    ) -> PairTable:
        """Create a pair table from species blocks.

        Args:
            species: Species blocks keyed by label, as validated models or
                plain mappings with ``shells``, ``hueckel_k`` and ``mass_amu``
            cutoff_factor: Cutoff radius in units of 1/sqrt(min alpha)

        Returns:
            PairTable covering every given species

        Raises:
            ConfigurationError: If a species block is invalid

        Examples:
            >>> table = TableFactory.create({
            ...     "A": {"shells": [{"kind": "s", "alpha": 0.5, "epsilon": -0.5}]},
            ... })
            >>> table.roster(["A", "A"]).size
            2
        """
        params: dict[str, SpeciesParams] = {}
        for label, block in species.items():
            if not isinstance(block, SpeciesConfig):
                try:
                    block = SpeciesConfig.model_validate(block)
                except ValueError as exc:
                    raise ConfigurationError(f"invalid species block: {exc}",
                                             field=f"species.{label}") from exc
            orbitals: list[OrbitalSpec] = []
            for shell in block.shells:
                orbitals.extend(cls.expand_shell(label, shell.kind, shell.alpha, shell.epsilon))
            params[label] = SpeciesParams(
                name=label,
                orbitals=tuple(orbitals),
                hueckel_k=block.hueckel_k,
                mass=amu_to_au(block.mass_amu),
            )
        logger.debug("Created pair table for species %s", ", ".join(params))
        return PairTable(species=params, cutoff_factor=cutoff_factor)

    @classmethod
    def create_from_file(cls, path: Union[str, Path], **kwargs: Any) -> PairTable:
        """Create a pair table from a species parameter file."""
        species_file = load_species_file(path)
        logger.info("Loaded %d species from %s", len(species_file.species), path)
        return cls.create(species_file.species, **kwargs)

    @classmethod
    def create_from_env(cls, **kwargs: Any) -> PairTable:
        """Create a pair table from the species file named in the environment.

        Raises:
            ConfigurationError: If the environment variable is not set
        """
        path = os.environ.get(cls.SPECIES_FILE_ENV_VAR)
        if path:
            return cls.create_from_file(path, **kwargs)
        raise ConfigurationError(
            "No species parameters found. Give [species] or species_file in the "
            f"run config, or set {cls.SPECIES_FILE_ENV_VAR}",
            field="species",
        )

    @classmethod
    def create_for_config(cls, config, base_dir: Optional[Path] = None) -> PairTable:
        """Resolve the species source of a run config: inline, file, then environment."""
        if config.species is not None:
            table = cls.create(config.species)
        elif config.species_file is not None:
            path = Path(config.species_file)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            table = cls.create_from_file(path)
        else:
            table = cls.create_from_env()
        labels = [atom.species for atom in config.geometry.atoms]
        if not table.covers(labels):
            missing = sorted(set(labels) - set(table.species))
            raise ConfigurationError(f"undefined species: {', '.join(missing)}",
                                     field="geometry.atoms")
        return table

    @classmethod
    def list_shell_kinds(cls) -> list[str]:
        """Get list of supported shell kinds."""
        return list(cls.SHELL_KINDS.keys())
