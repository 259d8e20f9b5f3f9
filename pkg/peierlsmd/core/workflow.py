"""Simulation workflow: wiring, the interleaved electron/nuclear loop and branch replay."""
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from peierlsmd.config import RunConfig, load_run_config, parse_run_config
from peierlsmd.core import adiabatic
from peierlsmd.core.adiabatic import AdiabaticitySettings, AdiabaticSnapshot
from peierlsmd.core.assembler import CouplingAssembler
from peierlsmd.core.branching import (
    BranchEvent,
    BranchPolicy,
    EventDetector,
    collapse,
    enumerate_branches,
    with_checkpoint,
)
from peierlsmd.core.coupling import CouplingFlags
from peierlsmd.core.field import PulseSpec, check_wavelength
from peierlsmd.core.ionization import SinkSpec
from peierlsmd.core.nuclei import (
    RepulsionTable,
    SystemGeometry,
    forces,
    maxwell_boltzmann_velocities,
    verlet_step,
)
from peierlsmd.core.propagator import ElectronState, StepTolerances, step
from peierlsmd.core.record import Frame, RecordHeader, RecordWriter, save_npz
from peierlsmd.errors import ConfigurationError, NumericalError
from peierlsmd.model.factory import TableFactory
from peierlsmd.units import amu_to_au, angstrom_to_bohr, as_to_au, fs_to_au

logger = logging.getLogger(__name__)

NUM_THREADS_ENV_VAR = "PEIERLSMD_NUM_THREADS"
CHECKPOINT_VERSION = 1


def thread_count() -> int:
    """Worker count for branch fan-out, from the environment (default 1)."""
    value = os.environ.get(NUM_THREADS_ENV_VAR, "1")
    try:
        count = int(value)
    except ValueError as exc:
        raise ConfigurationError(f"{NUM_THREADS_ENV_VAR} must be an integer, got '{value}'",
                                 field=NUM_THREADS_ENV_VAR) from exc
    if count < 1:
        raise ConfigurationError(f"{NUM_THREADS_ENV_VAR} must be at least 1",
                                 field=NUM_THREADS_ENV_VAR)
    return count


@dataclass
class RunCallbacks:
    """Callbacks for progress reporting during a run."""
    on_frame: Optional[Callable[[Frame], None]] = None
    on_event: Optional[Callable[[BranchEvent], None]] = None
    on_checkpoint: Optional[Callable[[Path], None]] = None
    on_status_update: Optional[Callable[[str], None]] = None


@dataclass
class RunResult:
    """Outcome of :meth:`Simulation.run`."""
    record_path: Path
    frames: int
    events: list[BranchEvent] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    state: Optional[ElectronState] = None
    geometry: Optional[SystemGeometry] = None


@dataclass
class _Resume:
    step: int
    state: ElectronState
    geometry: SystemGeometry
    forces: Optional[np.ndarray]
    event_index: int
    detector: dict
    pending: Optional[dict]


class Simulation:
    """One run of coupled electron-nuclear dynamics.

    Args:
        config: Validated run configuration
        source_text: TOML text of the configuration, stored in records and checkpoints
        base_dir: Directory that relative paths in the config are resolved against
        branch: Label of the branch this run continues, None for an original run
    """

    def __init__(self, config: RunConfig, source_text: str = "",
                 base_dir: Optional[Path] = None, branch: Optional[str] = None) -> None:
        self.config = config
        self.source_text = source_text
        self.base_dir = Path.cwd() if base_dir is None else Path(base_dir)
        self.branch = branch
        self._resume: Optional[_Resume] = None
        self.policy = BranchPolicy.from_config(config.branching)

        self.tables = TableFactory.create_for_config(config, self.base_dir)
        self.geometry = self._initial_geometry()
        self.pulse = PulseSpec.from_config(config.pulse) if config.pulse is not None else None
        if self.pulse is not None:
            check_wavelength(self.pulse, self.geometry.positions)
        self.flags = CouplingFlags.from_config(config.coupling)
        sink = SinkSpec.from_config(config.ionization) if config.ionization.enabled else None
        self.assembler = CouplingAssembler(self.tables, self.geometry, self.pulse, self.flags, sink)
        self.repulsion = RepulsionTable.from_config(config.repulsion)
        self.tolerances = StepTolerances.from_config(config.tolerances)
        mass = config.adiabatic.representative_mass_amu
        self.settings = AdiabaticitySettings(
            theta=config.adiabatic.theta,
            degeneracy_tol=config.adiabatic.degeneracy_tol,
            criterion=config.adiabatic.criterion,
            representative_mass=None if mass is None else amu_to_au(mass),
            orthonormality=config.tolerances.orthonormality,
        )

        integrator = config.integrator
        self.dt = as_to_au(integrator.dt_as)
        self.dt_nuclear = self.dt * integrator.ratio
        self.t_end = fs_to_au(integrator.t_end_fs)
        self.steps = max(1, math.ceil(self.t_end / self.dt_nuclear - 1e-9))

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "Simulation":
        """Load, validate and wire a run configuration file."""
        path = Path(path)
        config = load_run_config(path)
        return cls(config, path.read_text(encoding="utf-8"), path.parent)

    @classmethod
    def resume(cls, checkpoint: Union[str, Path],
               branch: Optional[Union[int, BranchPolicy]] = None) -> "Simulation":
        """Continue a run from a checkpoint.

        Args:
            checkpoint: Checkpoint written by a run
            branch: Adiabatic index (or policy) for the pending collapse; the
                run's own policy when omitted

        Raises:
            ConfigurationError: If the checkpoint cannot be read
        """
        path = Path(checkpoint)
        try:
            data = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise ConfigurationError(f"cannot read checkpoint {path}: {exc}") from exc
        with data:
            if int(data["version"]) != CHECKPOINT_VERSION:
                raise ConfigurationError(f"{path}: unsupported checkpoint version")
            text = str(data["config"])
            meta = json.loads(str(data["meta"]))
            arrays = {name: data[name] for name in data.files
                      if name not in ("config", "meta", "version")}
        config = parse_run_config(text, str(path))
        policy = branch if isinstance(branch, BranchPolicy) or branch is None \
            else BranchPolicy.fixed(int(branch))
        label = meta.get("branch")
        if policy is not None:
            suffix = f"e{meta['event_index']}-{policy.describe().replace('(', '').replace(')', '')}"
            label = suffix if label is None else f"{label}.{suffix}"
        elif label is None:
            label = f"resume{meta['step']}"
        sim = cls(config, text, Path(meta["base_dir"]), branch=label)
        if policy is not None:
            sim.policy = policy

        geometry = sim.geometry.with_positions(arrays["positions"]).with_velocities(arrays["velocities"])
        transferred = arrays["transferred"] if "transferred" in arrays else None
        state = ElectronState(arrays["coefficients"], arrays["occupations"], float(meta["t"]),
                              transferred)
        sim._resume = _Resume(
            step=int(meta["step"]), state=state, geometry=geometry,
            forces=arrays.get("forces"), event_index=int(meta["event_index"]),
            detector=meta["detector"], pending=meta.get("pending"),
        )
        logger.info("Resuming from %s at step %d as branch %s", path, sim._resume.step, label)
        return sim

    def _initial_geometry(self) -> SystemGeometry:
        block = self.config.geometry
        labels = [atom.species for atom in block.atoms]
        positions = np.array([[atom.x, atom.y, atom.z] for atom in block.atoms], dtype=float)
        if block.units == "angstrom":
            positions = angstrom_to_bohr(positions)
        velocities = np.array([[atom.vx, atom.vy, atom.vz] for atom in block.atoms], dtype=float)
        masses = self.tables.masses(labels)
        if block.frozen:
            velocities = np.zeros_like(velocities)
        elif block.temperature_k > 0.0:
            rng = np.random.default_rng(self.config.branching.seed)
            velocities = velocities + maxwell_boltzmann_velocities(masses, block.temperature_k, rng)
        geometry = SystemGeometry(tuple(labels), positions, velocities, masses,
                                  self.tables.roster(labels))
        geometry.check_separation(self.config.tolerances.min_distance)
        return geometry

    # ------------------------------------------------------------------ paths

    def _resolve(self, path: str) -> Path:
        candidate = Path(path)
        return candidate if candidate.is_absolute() else self.base_dir / candidate

    @property
    def record_path(self) -> Path:
        path = self._resolve(self.config.output.path)
        if self.config.output.format == "npz" and path.suffix != ".npz":
            path = path.with_suffix(".npz")
        if self.branch is not None:
            path = path.with_name(f"{path.stem}.{self.branch}{path.suffix}")
        return path

    @property
    def checkpoint_dir(self) -> Path:
        return self._resolve(self.config.output.checkpoint_dir)

    def _checkpoint_path(self, name: str) -> Path:
        prefix = "" if self.branch is None else f"{self.branch}."
        return self.checkpoint_dir / f"{prefix}{name}.npz"

    # ------------------------------------------------------------- state setup

    def initial_state(self) -> ElectronState:
        """Dressed adiabatic states D Psi_i of the initial geometry.

        Raises:
            ConfigurationError: If a requested state index does not exist
        """
        snapshot = adiabatic.eigensolve(self.geometry, self.tables, self.settings.degeneracy_tol,
                                        self.settings.orthonormality)
        levels = len(snapshot.energies)
        electrons = self.config.electrons
        if max(electrons.states) >= levels:
            raise ConfigurationError(f"state index {max(electrons.states)} out of range "
                                     f"(basis has {levels} levels)", field="electrons.states")
        self.assembler.move(self.geometry, 0.0)
        dressing = self.assembler.dressing(0.0, self.geometry)
        coefficients = dressing[:, None] * snapshot.vectors[:, electrons.states]
        occupations = np.asarray(electrons.occupations, dtype=float)
        transferred = np.zeros((len(occupations), self.geometry.roster.size))
        return ElectronState(coefficients.astype(complex), occupations, 0.0, transferred)

    def snapshot(self, state: ElectronState, geometry: SystemGeometry, t: float) -> AdiabaticSnapshot:
        dressing = self.assembler.dressing(t, geometry)
        return adiabatic.snapshot(geometry, self.tables, state.coefficients, self.settings,
                                  dressing, t)

    def _forces(self, geometry: SystemGeometry, state: ElectronState, t: float) -> np.ndarray:
        repulsion = self.repulsion if geometry.atom_count > 1 else None
        return forces(geometry, state, self.assembler, t, repulsion)

    def _detector(self) -> EventDetector:
        branching = self.config.branching
        end = None if self.pulse is None else self.pulse.end_time
        manual = [fs_to_au(t) for t in branching.manual_times_fs]
        occupations = np.asarray(self.config.electrons.occupations, dtype=float)
        return EventDetector(end, branching.delta_pop, manual, occupations)

    # ------------------------------------------------------------ diagnostics

    def frame(self, step_index: int, state: ElectronState, geometry: SystemGeometry,
              snapshot: AdiabaticSnapshot) -> Frame:
        """Observables of the current boundary."""
        t = state.t
        matrices = self.assembler.matrices(t)
        abar, ebar = self.assembler.field(t)
        norms = state.norms(matrices.s)
        transferred = state.total_transferred()
        cross = state.max_cross_overlap(matrices.s)
        e_electronic = self.assembler.electronic_energy(state, t)
        e_kinetic = geometry.kinetic_energy()
        e_repulsion = 0.0
        if geometry.atom_count > 1 and self.repulsion.covers(geometry.species):
            e_repulsion = self.repulsion.energy(geometry)

        tolerances = self.config.tolerances
        warnings = []
        if np.max(np.abs(norms + transferred - 1.0)) > tolerances.norm_band:
            warnings.append("norm_band")
        if cross > tolerances.norm_band:
            warnings.append("orthogonality")
        if np.max(np.abs(snapshot.populations.sum(axis=1) - norms)) > tolerances.population_sum:
            warnings.append("population_sum")

        weights = state.occupations
        return Frame(
            step=step_index, t=t,
            positions=geometry.positions.tolist(), velocities=geometry.velocities.tolist(),
            populations=(weights @ snapshot.populations).tolist(),
            state_populations=snapshot.populations.tolist(),
            orbital_populations=state.orbital_populations(matrices.s).tolist(),
            eigenvalues=snapshot.energies.tolist(),
            norms=norms.tolist(), transferred=transferred.tolist(),
            bound_norm=float(weights @ norms / np.sum(weights)) if np.sum(weights) else 0.0,
            cross_overlap=cross,
            e_total=e_electronic + e_kinetic + e_repulsion, e_kinetic=e_kinetic,
            e_electronic=e_electronic, e_repulsion=e_repulsion,
            a_bar=abar.tolist(), e_bar=ebar.tolist(),
            nonadiabatic=list(snapshot.nonadiabatic), warnings=warnings,
        )

    def header(self) -> RecordHeader:
        window = None
        if self.pulse is not None:
            start, end = self.pulse.support()
            window = (max(float(start), 0.0), float(min(end, self.steps * self.dt_nuclear)))
        return RecordHeader(
            config=self.source_text, source=str(self.base_dir),
            species=list(self.geometry.species), orbitals=self.geometry.roster.labels(),
            occupations=list(self.config.electrons.occupations),
            levels=self.geometry.roster.size, dt=self.dt, dt_nuclear=self.dt_nuclear,
            pulse_window=window, threshold=self.config.branching.threshold, branch=self.branch,
        )

    # ------------------------------------------------------------ checkpoints

    def write_checkpoint(self, path: Path, step_index: int, state: ElectronState,
                         geometry: SystemGeometry, current_forces: Optional[np.ndarray],
                         event_index: int, detector: EventDetector,
                         pending: Optional[BranchEvent] = None) -> Path:
        """Everything needed to continue the run bit-for-bit from this boundary."""
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "t": state.t, "step": step_index, "event_index": event_index,
            "base_dir": str(self.base_dir), "branch": self.branch,
            "detector": detector.state(),
            "pending": None if pending is None else pending.model_dump(mode="json"),
        }
        arrays = {
            "version": np.array(CHECKPOINT_VERSION),
            "config": np.array(self.source_text),
            "meta": np.array(json.dumps(meta)),
            "coefficients": state.coefficients,
            "occupations": state.occupations,
            "transferred": state.transferred if state.transferred is not None
            else np.zeros((state.state_count, state.size)),
            "positions": geometry.positions,
            "velocities": geometry.velocities,
        }
        if current_forces is not None:
            arrays["forces"] = current_forces
        save_npz(path, arrays)
        logger.debug("Checkpoint written to %s", path)
        return path

    # ------------------------------------------------------------------- loop

    def _electron_substeps(self, state: ElectronState, geometry: SystemGeometry,
                           t: float) -> ElectronState:
        self.assembler.move(geometry, t)
        for _ in range(self.config.integrator.ratio):
            state = step(state, self.assembler, self.dt, self.tolerances)
        return state

    def run(self, callbacks: Optional[RunCallbacks] = None) -> RunResult:
        """Run to t_end, writing the trajectory record and checkpoints.

        Returns:
            RunResult with the record path, events and final state

        Raises:
            NumericalError: On an unrecoverable step; ``checkpoint`` names the
                last good boundary
            GeometryError: If two nuclei overlap
        """
        callbacks = callbacks or RunCallbacks()
        config = self.config
        branching = config.branching
        frozen = config.geometry.frozen
        output_stride = config.integrator.output_stride
        analysis_stride = config.integrator.analysis_stride
        checkpoint_stride = config.output.checkpoint_stride

        detector = self._detector()
        pending: Optional[BranchEvent] = None
        if self._resume is None:
            state, geometry = self.initial_state(), self.geometry
            first, event_index, current_forces = 0, 0, None
        else:
            resume = self._resume
            state, geometry, first = resume.state, resume.geometry, resume.step
            event_index, current_forces = resume.event_index, resume.forces
            detector.restore(resume.detector)
            if resume.pending is not None:
                pending = BranchEvent.model_validate(resume.pending)

        result = RunResult(record_path=self.record_path, frames=0)
        self.assembler.move(geometry, state.t)
        if current_forces is None and not frozen:
            current_forces = self._forces(geometry, state, state.t)

        def emit_status(message: str) -> None:
            if callbacks.on_status_update is not None:
                callbacks.on_status_update(message)

        def adopt_event(event: BranchEvent) -> None:
            writer.write_event(event)
            result.events.append(event)
            if callbacks.on_event is not None:
                callbacks.on_event(event)

        def collapse_now(trigger: str, snapshot: AdiabaticSnapshot, index: int):
            dressing = self.assembler.dressing(state.t, geometry)
            return collapse(state, snapshot, self.policy, index, trigger, dressing,
                            config.tolerances.empty_branch)

        with RecordWriter(self.record_path, self.header(), config.output.format) as writer:
            step_index = first
            while True:
                self.assembler.move(geometry, state.t)
                snapshot = self.snapshot(state, geometry, state.t)
                trigger = None
                if pending is not None:
                    trigger, pending = pending.trigger, None
                elif step_index != first or self._resume is None:
                    if step_index % analysis_stride == 0 or step_index == self.steps:
                        trigger = detector.update(snapshot, state.t)
                if trigger is not None and branching.enabled:
                    collapsed, event = collapse_now(trigger, snapshot, event_index)
                    if self._resume is None or step_index != first:
                        path = self.write_checkpoint(
                            self._checkpoint_path(f"event-{event_index:03d}"), step_index,
                            state, geometry, current_forces, event_index, detector, event)
                        event = with_checkpoint(event, str(path))
                        result.checkpoints.append(path)
                        if callbacks.on_checkpoint is not None:
                            callbacks.on_checkpoint(path)
                    adopt_event(event)
                    event_index += 1
                    state = collapsed
                    snapshot = self.snapshot(state, geometry, state.t)
                    detector.rebase(snapshot)
                    if not frozen:
                        current_forces = self._forces(geometry, state, state.t)
                elif trigger is not None:
                    logger.info("Trigger %s at t=%.4f ignored, branching disabled", trigger, state.t)

                if step_index % output_stride == 0 or step_index == self.steps:
                    frame = self.frame(step_index, state, geometry, snapshot)
                    writer.write_frame(frame)
                    result.frames += 1
                    if callbacks.on_frame is not None:
                        callbacks.on_frame(frame)
                if (checkpoint_stride and step_index % checkpoint_stride == 0
                        and step_index not in (first, self.steps)):
                    path = self.write_checkpoint(self._checkpoint_path(f"step-{step_index:06d}"),
                                                 step_index, state, geometry, current_forces,
                                                 event_index, detector)
                    result.checkpoints.append(path)
                if step_index >= self.steps:
                    break

                boundary = (state, geometry, current_forces)
                try:
                    state, geometry, current_forces = self._nuclear_step(
                        state, geometry, current_forces, frozen)
                except NumericalError as exc:
                    good_state, good_geometry, good_forces = boundary
                    exc.checkpoint = str(self.write_checkpoint(
                        self._checkpoint_path(f"abort-{step_index:06d}"), step_index,
                        good_state, good_geometry, good_forces, event_index, detector))
                    logger.error("Run aborted at t=%.4f: %s (checkpoint %s)",
                                 good_state.t, exc, exc.checkpoint)
                    raise
                step_index += 1
                if step_index % max(1, self.steps // 20) == 0:
                    emit_status(f"step {step_index}/{self.steps}")

        self.write_manifest(result.events)
        result.state, result.geometry = state, geometry
        emit_status("done")
        logger.info("Run finished: %d frames, %d events, record %s",
                    result.frames, len(result.events), result.record_path)
        return result

    def _nuclear_step(self, state: ElectronState, geometry: SystemGeometry,
                      current_forces: Optional[np.ndarray], frozen: bool):
        t0 = state.t
        if frozen:
            return self._electron_substeps(state, geometry, t0), geometry, None
        holder = {"state": state}

        def on_drift(kicked: SystemGeometry, _moved: SystemGeometry) -> None:
            holder["state"] = self._electron_substeps(holder["state"], kicked, t0)

        def forces_fn(moved: SystemGeometry) -> np.ndarray:
            current = holder["state"]
            return self._forces(moved, current, current.t)

        new_geometry, new_forces = verlet_step(
            geometry, forces_fn, self.dt_nuclear, current_forces, on_drift,
            self.config.tolerances.min_distance)
        return holder["state"], new_geometry, new_forces

    # ---------------------------------------------------------------- manifest

    def write_manifest(self, events: Sequence[BranchEvent]) -> Optional[Path]:
        """Branch manifest: every event with its populations and available branches."""
        if not events:
            return None
        threshold = self.config.branching.threshold
        entries = [{
            "event": event.index, "t": event.t, "trigger": event.trigger,
            "policy": event.policy, "chosen": event.chosen, "populations": event.populations,
            "branches": [[i, w] for i, w in enumerate_branches(event, threshold)],
            "checkpoint": event.checkpoint,
        } for event in events]
        path = self._checkpoint_path("manifest").with_suffix(".json")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"record": str(self.record_path), "events": entries}, indent=2),
                        encoding="utf-8")
        return path


def checkpoint_branches(checkpoint: Union[str, Path],
                        threshold: Optional[float] = None) -> list[tuple[int, float]]:
    """Branches available at an event checkpoint."""
    with np.load(Path(checkpoint), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        text = str(data["config"])
    if meta.get("pending") is None:
        raise ConfigurationError(f"{checkpoint} is not an event checkpoint")
    event = BranchEvent.model_validate(meta["pending"])
    if threshold is None:
        threshold = parse_run_config(text, str(checkpoint)).branching.threshold
    return enumerate_branches(event, threshold)


def replay_branches(checkpoint: Union[str, Path], branches: Optional[Sequence[int]] = None,
                    threshold: Optional[float] = None,
                    callbacks: Optional[RunCallbacks] = None) -> list[RunResult]:
    """Run every selected branch of an event checkpoint, in parallel.

    Args:
        checkpoint: Event checkpoint
        branches: Adiabatic indices; all branches above threshold when omitted
        threshold: Population threshold for automatic selection
        callbacks: Shared progress callbacks

    Returns:
        One RunResult per branch, in the order of ``branches``
    """
    if branches is None:
        branches = [index for index, _ in checkpoint_branches(checkpoint, threshold)]
    workers = min(thread_count(), max(1, len(branches)))
    logger.info("Replaying %d branches of %s on %d threads", len(branches), checkpoint, workers)

    def replay(index: int) -> RunResult:
        return Simulation.resume(checkpoint, index).run(callbacks)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(replay, branches))
