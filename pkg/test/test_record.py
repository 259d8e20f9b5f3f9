"""Unit tests for trajectory records and analysis queries."""
import json

import numpy as np
import pytest

from peierlsmd.core.branching import BranchEvent
from peierlsmd.core.record import (
    Frame,
    RecordHeader,
    RecordWriter,
    TrajectoryRecord,
    analyze,
    fitted_period,
    read_record,
)
from peierlsmd.errors import ConfigurationError, SchemaVersionError
from peierlsmd.units import au_to_fs

HEADER = RecordHeader(species=["A", "A"], orbitals=["A0:s", "A1:s"], occupations=[1.0],
                      levels=2, dt=0.4, dt_nuclear=2.0, pulse_window=(10.0, 50.0))
EVENT = BranchEvent(index=0, t=55.0, trigger="pulse_end", populations=[[0.9, 0.08, 0.02]],
                    chosen=[0], policy="argmax", checkpoint="ckpt/event-000.npz")


def _frame(step, t, excited=0.0, e_total=-1.0, transferred=0.0, warnings=()):
    return Frame(
        step=step, t=t, positions=[[0.0, 0.0, 0.0], [0.0, 0.0, 1.4]],
        velocities=[[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
        populations=[1.0 - excited, excited], state_populations=[[1.0 - excited, excited]],
        orbital_populations=[0.5, 0.5], eigenvalues=[-0.6424, 0.0929],
        norms=[1.0 - transferred], transferred=[transferred], bound_norm=1.0,
        cross_overlap=0.0, e_total=e_total, e_kinetic=0.0, e_electronic=e_total,
        e_repulsion=0.0, a_bar=[0.0, 0.0, 0.1 * step], e_bar=[0.0, 0.0, 0.0],
        nonadiabatic=[(0, 1)] if excited else [], warnings=list(warnings))


FRAMES = [_frame(0, 0.0), _frame(1, 30.0, 0.1, -0.9, 0.01, ["norm"]), _frame(2, 60.0, 0.2, -0.8, 0.03)]


@pytest.fixture
def record_file(tmp_path):
    """Factory writing FRAMES and EVENT in the requested format."""
    def write(fmt="ndjson", name="run"):
        path = tmp_path / f"{name}.{fmt}"
        with RecordWriter(path, HEADER, fmt) as writer:
            for frame in FRAMES[:2]:
                writer.write_frame(frame)
            writer.write_event(EVENT)
            writer.write_frame(FRAMES[2])
        return path
    return write


class TestRecordWriter:
    """Tests for RecordWriter and read_record."""

    @pytest.mark.parametrize("fmt", ["ndjson", "npz"])
    def test_read_back(self, record_file, fmt):
        """Test that a written record reads back unchanged."""
        record = read_record(record_file(fmt))
        assert record.header == HEADER
        assert record.frames == FRAMES
        assert record.events == [EVENT]

    def test_ndjson_layout(self, record_file):
        """Test one header line, then frames and events in write order."""
        lines = record_file("ndjson").read_text(encoding="utf-8").splitlines()
        assert [json.loads(line)["kind"] for line in lines] == ["header", "frame", "frame", "event", "frame"]

    def test_npz_is_deterministic(self, record_file):
        """Test that two identical npz records are byte-identical."""
        first = record_file("npz", "first").read_bytes()
        second = record_file("npz", "second").read_bytes()
        assert first == second

    def test_times_must_increase(self, tmp_path):
        """Test that a frame not after its predecessor raises ValueError."""
        with RecordWriter(tmp_path / "run.ndjson", HEADER) as writer:
            writer.write_frame(FRAMES[1])
            with pytest.raises(ValueError):
                writer.write_frame(FRAMES[0])

    def test_unknown_format(self, tmp_path):
        """Test that an unknown format raises ValueError."""
        with pytest.raises(ValueError) as exc_info:
            RecordWriter(tmp_path / "run.h5", HEADER, "hdf5")
        assert "Unsupported record format" in str(exc_info.value)


class TestReadRecord:
    """Tests for reading invalid records."""

    def test_schema_version_mismatch(self, tmp_path):
        """Test that a record of another schema version raises SchemaVersionError."""
        path = tmp_path / "old.ndjson"
        header = json.loads(HEADER.model_dump_json())
        header["schema_version"] = 2
        path.write_text(json.dumps(header) + "\n", encoding="utf-8")
        with pytest.raises(SchemaVersionError) as exc_info:
            read_record(path)
        assert "schema_version 2" in str(exc_info.value)

    def test_missing(self, tmp_path):
        """Test that a missing record raises ConfigurationError."""
        with pytest.raises(ConfigurationError) as exc_info:
            read_record(tmp_path / "absent.ndjson")
        assert "does not exist" in str(exc_info.value)

    def test_malformed_line(self, tmp_path):
        """Test that a broken line is reported with its line number."""
        path = tmp_path / "broken.ndjson"
        path.write_text(HEADER.model_dump_json() + "\n{\"kind\": \"frame\", \"t\": 1\n",
                        encoding="utf-8")
        with pytest.raises(ConfigurationError) as exc_info:
            read_record(path)
        assert exc_info.value.line == 2

    def test_monotonic_check(self):
        """Test that repeated frame times are rejected."""
        record = TrajectoryRecord(header=HEADER, frames=[FRAMES[1], FRAMES[1]])
        with pytest.raises(ValueError):
            record.check_monotonic()


class TestAnalyze:
    """Tests for analyze."""

    def test_summary(self, record_file):
        """Test the summary without queries."""
        result = analyze(record_file())
        assert result.summary["frames"] == 3
        assert result.summary["events"] == 1
        assert result.summary["warnings"] == 1
        assert result.summary["t_end_fs"] == pytest.approx(au_to_fs(60.0))
        assert not result.tables

    def test_series(self, record_file):
        """Test the per-frame tables."""
        result = analyze(record_file(), ["populations", "gaps", "norms", "energy", "ionization",
                                         "orbitals"])
        assert result.tables["populations"].columns == ["t_fs", "P0", "P1"]
        assert result.tables["populations"].column("P1") == pytest.approx([0.0, 0.1, 0.2])
        assert result.tables["gaps"].column("gap0_1")[0] == pytest.approx(0.7353)
        assert result.tables["norms"].columns == ["t_fs", "norm0", "bound_norm", "cross_overlap"]
        assert result.tables["energy"].column("e_total") == pytest.approx([-1.0, -0.9, -0.8])
        assert result.tables["ionization"].column("ionized_total") == pytest.approx([0.0, 0.01, 0.03])
        assert result.tables["orbitals"].columns == ["t_fs", "A0:s", "A1:s"]

    def test_absorbed_energy(self, record_file):
        """Test the energy difference across the pulse window."""
        result = analyze(record_file("npz"), ["absorbed_energy"])
        assert result.values["absorbed_energy"] == pytest.approx(0.2)

    def test_branches(self, record_file):
        """Test the branch table above the header threshold."""
        table = analyze(record_file(), ["branches"]).tables["branches"]
        assert table.column("branches") == [[0, 1]]
        assert table.column("weights") == [[0.9, 0.08]]
        assert table.column("checkpoint") == ["ckpt/event-000.npz"]

    def test_frameless_record(self, tmp_path):
        """Test that per-frame queries on a record without frames give empty tables."""
        path = tmp_path / "empty.ndjson"
        with RecordWriter(path, HEADER.model_copy(update={"orbitals": []}), "ndjson"):
            pass
        result = analyze(path, ["orbitals", "norms", "ionization"])
        assert result.summary["frames"] == 0
        assert result.tables["orbitals"].columns == ["t_fs"]
        assert result.tables["orbitals"].rows == []
        assert result.tables["norms"].columns == ["t_fs", "bound_norm", "cross_overlap"]

    def test_unknown_query(self, record_file):
        """Test that an unknown query raises ValueError."""
        with pytest.raises(ValueError) as exc_info:
            analyze(record_file(), ["spectrum"])
        assert "Unsupported query: 'spectrum'" in str(exc_info.value)

    def test_period(self, tmp_path):
        """Test fitting the period of a Rabi-like population."""
        rabi = 0.01
        times = np.linspace(0.0, 3.0 * 2.0 * np.pi / rabi, 120)
        path = tmp_path / "rabi.ndjson"
        with RecordWriter(path, HEADER) as writer:
            for step, t in enumerate(times):
                writer.write_frame(_frame(step, float(t), 0.8 * np.sin(0.5 * rabi * t) ** 2))
        result = analyze(path, ["period"])
        assert result.values["period"] == pytest.approx(2.0 * np.pi / rabi, rel=1e-6)


class TestFittedPeriod:
    """Tests for fitted_period."""

    def test_too_few_samples(self):
        """Test that short series are rejected."""
        with pytest.raises(ValueError) as exc_info:
            fitted_period(np.arange(5.0), np.zeros(5))
        assert "at least 8 samples" in str(exc_info.value)
