"""Unit tests for workflow.py module."""
import json
from pathlib import Path
from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from peierlsmd.core.record import read_record
from peierlsmd.core.workflow import (
    NUM_THREADS_ENV_VAR,
    RunCallbacks,
    Simulation,
    checkpoint_branches,
    replay_branches,
    thread_count,
)
from peierlsmd.errors import ConfigurationError, NumericalError
from peierlsmd.units import fs_to_au


SPECIES_BLOCKS = """
[species.A]
mass_amu = 1.008
shells = [{kind = "s", alpha = 0.5, epsilon = -0.5}]

[species.B]
mass_amu = 2.016
shells = [{kind = "s", alpha = 0.4, epsilon = -0.3}]

[species.X]
mass_amu = 12.0
shells = [{kind = "s", alpha = 0.5, epsilon = 0.0}, {kind = "p", alpha = 0.5, epsilon = 0.1}]
"""


def _repulsion(*pairs: str) -> str:
    return "".join(f'\n[[repulsion]]\nspecies = ["{p[0]}", "{p[1]}"]\nb = 0.675\nlambda = 1.5\n'
                   f'cutoff = 8.0\n' for p in pairs)


TRIATOMIC_PULSE = SPECIES_BLOCKS + _repulsion("AA", "AB", "AX", "BB", "BX", "XX") + """
[geometry]
atoms = [
    {species = "A", x = 0.0, y = 0.0, z = 0.0, vx = 1e-3, vz = 5e-4},
    {species = "X", x = 0.3, y = 0.1, z = 1.5, vy = 4e-4},
    {species = "B", x = 1.6, y = -0.2, z = 2.1, vz = -6e-4},
]

[pulse]
intensity_wcm2 = 1e12
omega_au = 0.3
envelope = "sin2"
tau_fs = 1.0
t0_fs = 0.5
polarization = [0.0, 0.6, 0.8]

[integrator]
dt_as = 0.5
ratio = 10
t_end_fs = 1.2
output_stride = 1

[electrons]
states = [0, 1]
occupations = [2.0, 1.0]

[branching]
enabled = false

[output]
path = "triatomic.ndjson"
checkpoint_dir = "ckpt"
"""

DRIFTING_DIMER = SPECIES_BLOCKS + _repulsion("AA", "AB", "BB") + """
[geometry]
atoms = [
    {species = "A", x = 0.0, y = 0.0, z = 0.0, vx = 1e-3, vz = 2e-4},
    {species = "B", x = 0.0, y = 0.0, z = 1.6, vx = -2e-4, vy = 3e-4, vz = -1e-3},
]

[integrator]
dt_as = 2.0
ratio = 10
t_end_fs = 2.0
output_stride = 5

[branching]
enabled = false

[output]
path = "drifting.ndjson"
checkpoint_dir = "ckpt"
"""

LONG_DIMER = SPECIES_BLOCKS + _repulsion("AA") + """
[geometry]
atoms = [
    {species = "A", x = 0.0, y = 0.0, z = 0.0},
    {species = "A", x = 0.0, y = 0.0, z = 1.45},
]

[integrator]
dt_as = 5.0
ratio = 4
t_end_fs = 100.0
output_stride = 25

[branching]
enabled = false

[output]
path = "long.ndjson"
checkpoint_dir = "ckpt"
"""

THERMAL_DIMER = SPECIES_BLOCKS + _repulsion("AA") + """
[geometry]
temperature_k = 300.0
atoms = [
    {species = "A", x = 0.0, y = 0.0, z = 0.0},
    {species = "A", x = 0.0, y = 0.0, z = 1.4},
]

[pulse]
intensity_wcm2 = 1e12
omega_au = 0.735
envelope = "sin2"
tau_fs = 3.0
t0_fs = 1.5

[coupling]
mode = "{mode}"
velocity_term = {velocity}

[integrator]
dt_as = 5.0
ratio = 10
t_end_fs = 3.5
output_stride = 10

[electrons]
states = [0]
occupations = [1.0]

[branching]
enabled = false
seed = 7

[output]
path = "thermal-{mode}-{velocity}.ndjson"
checkpoint_dir = "ckpt"
"""

COLLAPSING_DIMER = SPECIES_BLOCKS + _repulsion("AA") + """
[geometry]
atoms = [
    {species = "A", x = 0.0, y = 0.0, z = 0.0},
    {species = "A", x = 0.0, y = 0.0, z = 1.45},
]

[pulse]
intensity_wcm2 = 1e12
omega_au = 0.735
envelope = "sin2"
tau_fs = 2.0
t0_fs = 1.0

[integrator]
dt_as = 5.0
ratio = 10
t_end_fs = 12.5
output_stride = 5

[electrons]
states = [0]
occupations = [1.0]

[output]
path = "collapse.ndjson"
checkpoint_dir = "ckpt"
"""


@pytest.fixture
def mock_callbacks():
    """Create mock callbacks for run events."""
    return RunCallbacks(
        on_frame=MagicMock(),
        on_event=MagicMock(),
        on_checkpoint=MagicMock(),
        on_status_update=MagicMock(),
    )


@pytest.fixture
def frozen_run(frozen_dimer_config):
    """Frozen dimer run with its pulse_end collapse, returns (simulation, result)."""
    simulation = Simulation.from_file(frozen_dimer_config)
    return simulation, simulation.run()


class TestThreadCount:
    """Tests for thread_count."""

    def test_default(self, mock_env):
        """Test one worker when the variable is unset."""
        mock_env.pop(NUM_THREADS_ENV_VAR, None)
        assert thread_count() == 1

    def test_from_environment(self, mock_env):
        """Test reading the worker count."""
        mock_env[NUM_THREADS_ENV_VAR] = "4"
        assert thread_count() == 4

    @pytest.mark.parametrize("value", ["zero", "0"])
    def test_invalid(self, mock_env, value):
        """Test that a non-integer or non-positive count raises ConfigurationError."""
        mock_env[NUM_THREADS_ENV_VAR] = value
        with pytest.raises(ConfigurationError) as exc_info:
            thread_count()
        assert NUM_THREADS_ENV_VAR in str(exc_info.value)


class TestSimulationSetup:
    """Tests for Simulation construction."""

    def test_schedule(self, moving_dimer_config):
        """Test time steps and the nuclear step count."""
        simulation = Simulation.from_file(moving_dimer_config)
        assert simulation.dt_nuclear == pytest.approx(10 * simulation.dt)
        assert simulation.steps == 100
        assert simulation.record_path == Path(moving_dimer_config).parent / "moving.ndjson"

    def test_initial_state(self, frozen_dimer_config):
        """Test that the initial state is the S0-normalized ground level."""
        simulation = Simulation.from_file(frozen_dimer_config)
        state = simulation.initial_state()
        blocks = simulation.tables.field_free(simulation.geometry.roster, simulation.geometry.positions)
        assert state.norms(blocks.s0) == pytest.approx([1.0])
        assert np.all(state.transferred == 0.0)

    def test_state_out_of_range(self, frozen_dimer_config, write_config):
        """Test that requesting a level beyond the basis raises ConfigurationError."""
        text = Path(frozen_dimer_config).read_text(encoding="utf-8").replace("states = [0]", "states = [5]")
        simulation = Simulation.from_file(write_config(text, "bad.toml"))
        with pytest.raises(ConfigurationError) as exc_info:
            simulation.initial_state()
        assert exc_info.value.field == "electrons.states"


class TestRun:
    """Tests for Simulation.run."""

    def test_field_free_energy_conserved(self, moving_dimer_config, mock_callbacks):
        """Test total energy conservation of a vibrating dimer and the periodic checkpoints."""
        result = Simulation.from_file(moving_dimer_config).run(mock_callbacks)
        record = read_record(result.record_path)
        assert result.frames == len(record.frames) == 21
        assert mock_callbacks.on_frame.call_count == 21
        mock_callbacks.on_status_update.assert_called_with("done")
        energy = record.column("e_total")
        assert np.max(energy) - np.min(energy) < 5e-5
        bond = [np.linalg.norm(np.subtract(*f.positions)) for f in record.frames]
        assert min(bond) < bond[0]
        assert [p.name for p in result.checkpoints] == [
            "step-000020.npz", "step-000040.npz", "step-000060.npz", "step-000080.npz"]
        assert not result.events

    def test_runs_are_deterministic(self, moving_dimer_config):
        """Test that repeating a run reproduces the record byte for byte."""
        first = Simulation.from_file(moving_dimer_config).run()
        content = first.record_path.read_bytes()
        second = Simulation.from_file(moving_dimer_config).run()
        assert second.record_path.read_bytes() == content

    def test_peierls_only_leaves_atom_unexcited(self, isolated_atom_config):
        """Test that the phase alone cannot excite an isolated atom."""
        result = Simulation.from_file(isolated_atom_config("peierls_only")).run()
        populations = np.array([f.populations for f in read_record(result.record_path).frames])
        np.testing.assert_allclose(populations[:, 0], 1.0, atol=1e-10)

    def test_full_coupling_excites_atom(self, isolated_atom_config):
        """Test that the dipole term drives the resonant s-p transition."""
        result = Simulation.from_file(isolated_atom_config("full")).run()
        final = read_record(result.record_path).frames[-1]
        assert sum(final.populations[1:]) > 1e-3
        assert sum(final.populations) == pytest.approx(1.0, abs=1e-6)

    def test_pulse_end_event(self, frozen_run):
        """Test the collapse at the end of the pulse, its checkpoint and the manifest."""
        simulation, result = frozen_run
        assert len(result.events) == 1
        event = result.events[0]
        assert event.trigger == "pulse_end"
        assert event.t >= simulation.pulse.end_time
        assert event.chosen == [0]
        checkpoint = simulation.checkpoint_dir / "event-000.npz"
        assert event.checkpoint == str(checkpoint)
        assert checkpoint.exists()
        manifest = json.loads((simulation.checkpoint_dir / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["events"][0]["trigger"] == "pulse_end"
        assert manifest["events"][0]["branches"][0][0] == 0
        record = read_record(result.record_path)
        assert [e.index for e in record.events] == [0]

    def test_abort_writes_checkpoint(self, frozen_dimer_config):
        """Test that a failed step leaves a checkpoint of the last good boundary."""
        simulation = Simulation.from_file(frozen_dimer_config)
        with patch("peierlsmd.core.workflow.step", side_effect=NumericalError("singular")):
            with pytest.raises(NumericalError) as exc_info:
                simulation.run()
        assert exc_info.value.checkpoint.endswith("abort-000000.npz")
        assert Path(exc_info.value.checkpoint).exists()


class TestRunProperties:
    """Run-level conservation and agreement checks."""

    def test_norm_and_orthogonality_bands(self, write_config):
        """Test the 1e-8 norm and cross-overlap bands of a moving triatomic in a pulse."""
        result = Simulation.from_file(write_config(TRIATOMIC_PULSE)).run()
        frames = read_record(result.record_path).frames
        assert len(frames) > 200
        norms = np.array([f.norms for f in frames])
        assert np.max(np.abs(norms - 1.0)) < 1e-8
        assert max(f.cross_overlap for f in frames) < 1e-8
        assert not any("norm_band" in f.warnings or "orthogonality" in f.warnings for f in frames)

    def test_field_free_momentum_conserved(self, write_config):
        """Test that the total nuclear momentum of a drifting dimer stays fixed."""
        simulation = Simulation.from_file(write_config(DRIFTING_DIMER))
        masses = simulation.geometry.masses
        result = simulation.run()
        momenta = np.array([masses @ np.array(f.velocities)
                            for f in read_record(result.record_path).frames])
        assert np.linalg.norm(momenta[0]) > 1e-2
        assert np.max(np.abs(momenta - momenta[0])) < 1e-8

    def test_long_run_energy_drift(self, write_config):
        """Test that the mean total energy drifts by less than 1e-5 Eh over 100 fs."""
        result = Simulation.from_file(write_config(LONG_DIMER)).run()
        record = read_record(result.record_path)
        times = np.array([f.t for f in record.frames])
        energy = record.column("e_total")
        window = fs_to_au(10.0)
        first = energy[times <= times[0] + window].mean()
        last = energy[times >= times[-1] - window].mean()
        assert times[-1] == pytest.approx(fs_to_au(100.0))
        assert abs(last - first) < 1e-5

    def test_velocity_term_and_mode_agreement(self, write_config):
        """Test that the velocity term and the coupling mode barely change final populations."""
        def final_populations(mode: str, velocity: str) -> np.ndarray:
            text = THERMAL_DIMER.replace("{mode}", mode).replace("{velocity}", velocity)
            result = Simulation.from_file(write_config(text, f"{mode}-{velocity}.toml")).run()
            return np.array(read_record(result.record_path).frames[-1].populations)

        full = final_populations("full", "true")
        without_velocity = final_populations("full", "false")
        generalized = final_populations("generalized_peierls", "true")
        assert sum(full[1:]) > 1e-4
        assert np.max(np.abs(full - without_velocity)) < 0.01
        assert np.max(np.abs(full - generalized)) < 0.05

    def test_chosen_level_kept_after_collapse(self, write_config):
        """Test that the chosen level keeps more than 0.999 of the population for 10 fs."""
        result = Simulation.from_file(write_config(COLLAPSING_DIMER)).run()
        event = next(e for e in result.events if e.trigger == "pulse_end")
        chosen = event.chosen[0]
        horizon = event.t + fs_to_au(10.0)
        frames = [f for f in read_record(result.record_path).frames if event.t <= f.t <= horizon]
        assert frames[-1].t > horizon - fs_to_au(0.1)
        assert min(f.populations[chosen] for f in frames) > 0.999

    def test_orthonormality_tolerance_from_config(self, frozen_dimer_config, write_config):
        """Test that the eigenvector tolerance reaches the analysis settings."""
        text = Path(frozen_dimer_config).read_text(encoding="utf-8")
        text += "\n[tolerances]\northonormality = 1e-9\n"
        simulation = Simulation.from_file(write_config(text, "tolerance.toml"))
        assert simulation.settings.orthonormality == 1e-9


class TestResume:
    """Tests for resuming and branch replay."""

    def test_resume_reproduces_frames(self, moving_dimer_config):
        """Test that continuing from a step checkpoint matches the original run."""
        original = Simulation.from_file(moving_dimer_config).run()
        checkpoint = next(p for p in original.checkpoints if p.name == "step-000040.npz")
        resumed = Simulation.resume(checkpoint).run()
        assert resumed.record_path.name == "moving.resume40.ndjson"
        before = [f for f in read_record(original.record_path).frames if f.step >= 40]
        after = read_record(resumed.record_path).frames
        assert [f.step for f in after] == [f.step for f in before]
        np.testing.assert_allclose([f.positions for f in after], [f.positions for f in before],
                                   rtol=1e-12)
        np.testing.assert_allclose([f.e_total for f in after], [f.e_total for f in before],
                                   rtol=1e-12)

    def test_resume_other_branch(self, frozen_run):
        """Test continuing the pulse_end event on the excited level."""
        simulation, _ = frozen_run
        checkpoint = simulation.checkpoint_dir / "event-000.npz"
        result = Simulation.resume(checkpoint, 1).run()
        assert result.record_path.name == "trajectory.e0-fixed1.ndjson"
        assert result.events[0].chosen == [1]
        assert result.events[0].policy == "fixed(1)"
        final = read_record(result.record_path).frames[-1]
        assert final.populations[1] == pytest.approx(1.0, abs=1e-6)

    def test_checkpoint_branches(self, frozen_run):
        """Test listing the branches of an event checkpoint."""
        simulation, result = frozen_run
        branches = checkpoint_branches(simulation.checkpoint_dir / "event-000.npz", threshold=0.0)
        assert [index for index, _ in branches] == [0, 1]
        assert sum(weight for _, weight in branches) == pytest.approx(1.0)
        assert branches[0][1] == pytest.approx(result.events[0].frontier[0])

    def test_step_checkpoint_has_no_branches(self, moving_dimer_config):
        """Test that a periodic checkpoint is not an event checkpoint."""
        result = Simulation.from_file(moving_dimer_config).run()
        with pytest.raises(ConfigurationError) as exc_info:
            checkpoint_branches(result.checkpoints[0])
        assert "is not an event checkpoint" in str(exc_info.value)

    def test_replay_branches(self, frozen_run, mock_env):
        """Test replaying both branches on two threads."""
        mock_env[NUM_THREADS_ENV_VAR] = "2"
        simulation, _ = frozen_run
        results = replay_branches(simulation.checkpoint_dir / "event-000.npz", [0, 1])
        assert [r.record_path.name for r in results] == [
            "trajectory.e0-fixed0.ndjson", "trajectory.e0-fixed1.ndjson"]
        assert [r.events[0].chosen for r in results] == [[0], [1]]

    def test_unreadable_checkpoint(self, tmp_path):
        """Test that a missing checkpoint raises ConfigurationError."""
        with pytest.raises(ConfigurationError) as exc_info:
            Simulation.resume(tmp_path / "absent.npz")
        assert "cannot read checkpoint" in str(exc_info.value)
