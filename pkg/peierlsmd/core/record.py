"""Trajectory records: NDJSON or npz storage, reading and analysis queries.

An NDJSON record is one header line, then frame and event lines in time
order. Every line is a pydantic model dumped as JSON, so a record can be
diffed and read back without loss. The npz variant stores the numeric
frame columns as arrays next to the JSON header and events.
"""
import io
import json
import logging
import zipfile
from pathlib import Path
from typing import Any, Iterable, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy.optimize import curve_fit

from peierlsmd.core.branching import BranchEvent, enumerate_branches
from peierlsmd.errors import ConfigurationError, SchemaVersionError
from peierlsmd.units import au_to_fs

logger = logging.getLogger(__name__)

RECORD_SCHEMA_VERSION = 1
QUERIES = ("populations", "orbitals", "gaps", "norms", "energy", "absorbed_energy",
           "ionization", "branches", "period")

# fixed zip timestamps keep binary output byte-identical between runs
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class RecordHeader(BaseModel):
    """First line of a record: schema, run configuration and basis layout."""
    model_config = ConfigDict(frozen=True)

    kind: Literal["header"] = "header"
    schema_version: int = RECORD_SCHEMA_VERSION
    config: str = ""
    source: str = ""
    species: list[str] = []
    orbitals: list[str] = []
    occupations: list[float] = []
    levels: int = 0
    dt: float = 0.0
    dt_nuclear: float = 0.0
    pulse_window: Optional[tuple[float, float]] = None
    threshold: float = 0.05
    branch: Optional[str] = None


class Frame(BaseModel):
    """Observables at one nuclear-step boundary (atomic units throughout)."""
    kind: Literal["frame"] = "frame"
    step: int
    t: float
    positions: list[list[float]]
    velocities: list[list[float]]
    populations: list[float]
    state_populations: list[list[float]]
    orbital_populations: list[float]
    eigenvalues: list[float]
    norms: list[float]
    transferred: list[float]
    bound_norm: float
    cross_overlap: float
    e_total: float
    e_kinetic: float
    e_electronic: float
    e_repulsion: float
    a_bar: list[float]
    e_bar: list[float]
    nonadiabatic: list[tuple[int, int]] = []
    warnings: list[str] = []


class EventRecord(BaseModel):
    kind: Literal["event"] = "event"
    event: BranchEvent


_ARRAY_FIELDS = ("step", "t", "positions", "velocities", "populations", "state_populations",
                 "orbital_populations", "eigenvalues", "norms", "transferred", "bound_norm",
                 "cross_overlap", "e_total", "e_kinetic", "e_electronic", "e_repulsion",
                 "a_bar", "e_bar")
_META_FIELDS = ("nonadiabatic", "warnings")


class TrajectoryRecord(BaseModel):
    """A fully loaded record."""
    header: RecordHeader
    frames: list[Frame] = Field(default_factory=list)
    events: list[BranchEvent] = Field(default_factory=list)

    def times(self) -> np.ndarray:
        return np.array([frame.t for frame in self.frames])

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(frame, name) for frame in self.frames], dtype=float)

    def check_monotonic(self) -> None:
        times = self.times()
        if len(times) > 1 and np.any(np.diff(times) <= 0.0):
            raise ValueError("frame times are not strictly increasing")


def save_npz(path: Union[str, Path], arrays: dict[str, Any]) -> None:
    """np.savez_compressed with fixed member timestamps."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as archive:
        for name, value in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            with archive.open(info, "w", force_zip64=True) as handle:
                np.lib.format.write_array(handle, np.asanyarray(value), allow_pickle=False)


class RecordWriter:
    """Streams a record to disk; use as a context manager.

    Args:
        path: Output file
        header: Record header, written first
        fmt: ``ndjson`` (streamed line by line) or ``npz`` (written on close)
    """

    def __init__(self, path: Union[str, Path], header: RecordHeader, fmt: str = "ndjson") -> None:
        if fmt not in ("ndjson", "npz"):
            raise ValueError(f"Unsupported record format: '{fmt}'. Available formats: ndjson, npz")
        self.path = Path(path)
        self.header = header
        self.format = fmt
        self.frames: list[Frame] = []
        self.events: list[BranchEvent] = []
        self._handle: Optional[io.TextIOBase] = None
        self._last_t: Optional[float] = None
        self._closed = False

    def __enter__(self) -> "RecordWriter":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.format == "ndjson":
            self._handle = self.path.open("w", encoding="utf-8", newline="\n")
            self._handle.write(self.header.model_dump_json() + "\n")
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def write_frame(self, frame: Frame) -> None:
        if self._last_t is not None and frame.t <= self._last_t:
            raise ValueError(f"frame at t={frame.t} does not follow t={self._last_t}")
        self._last_t = frame.t
        if self._handle is not None:
            self._handle.write(frame.model_dump_json() + "\n")
        else:
            self.frames.append(frame)

    def write_event(self, event: BranchEvent) -> None:
        if self._handle is not None:
            self._handle.write(EventRecord(event=event).model_dump_json() + "\n")
        else:
            self.events.append(event)

    def flush(self) -> None:
        if self._handle is not None:
            self._handle.flush()

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None
            return
        if self.format != "npz" or self._closed:
            return
        arrays: dict[str, Any] = {
            "header": np.array(self.header.model_dump_json()),
            "events": np.array(json.dumps([e.model_dump(mode="json") for e in self.events])),
            "meta": np.array(json.dumps([frame.model_dump(mode="json", include=set(_META_FIELDS))
                                         for frame in self.frames])),
        }
        for name in _ARRAY_FIELDS:
            arrays[name] = np.array([getattr(frame, name) for frame in self.frames])
        save_npz(self.path, arrays)
        self._closed = True


def _check_version(version: Any, path: Path) -> None:
    if version != RECORD_SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: record schema_version {version} is not supported "
            f"(expected {RECORD_SCHEMA_VERSION})",
            field="schema_version",
        )


def _read_ndjson(path: Path) -> TrajectoryRecord:
    lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines:
        raise ConfigurationError(f"{path}: empty record")
    head = json.loads(lines[0])
    if head.get("kind") != "header":
        raise ConfigurationError(f"{path}: first line is not a record header", line=1)
    _check_version(head.get("schema_version"), path)
    header = RecordHeader.model_validate(head)
    frames: list[Frame] = []
    events: list[BranchEvent] = []
    for number, line in enumerate(lines[1:], start=2):
        try:
            data = json.loads(line)
            if data.get("kind") == "frame":
                frames.append(Frame.model_validate(data))
            elif data.get("kind") == "event":
                events.append(EventRecord.model_validate(data).event)
            else:
                raise ConfigurationError(f"{path}: unknown record line kind", line=number)
        except (json.JSONDecodeError, ValidationError) as exc:
            raise ConfigurationError(f"{path}: malformed record line: {exc}", line=number) from exc
    return TrajectoryRecord(header=header, frames=frames, events=events)


def _read_npz(path: Path) -> TrajectoryRecord:
    with np.load(path, allow_pickle=False) as data:
        head = json.loads(str(data["header"]))
        _check_version(head.get("schema_version"), path)
        header = RecordHeader.model_validate(head)
        meta = json.loads(str(data["meta"]))
        columns = {name: data[name] for name in _ARRAY_FIELDS}
        events = [BranchEvent.model_validate(e) for e in json.loads(str(data["events"]))]
    frames = [Frame(**{name: columns[name][k].tolist() for name in _ARRAY_FIELDS}, **meta[k])
              for k in range(len(meta))]
    return TrajectoryRecord(header=header, frames=frames, events=events)


def read_record(path: Union[str, Path]) -> TrajectoryRecord:
    """Load a record written by :class:`RecordWriter`.

    Raises:
        SchemaVersionError: If the record uses another schema version
        ConfigurationError: If the file is missing or malformed
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"record {path} does not exist")
    if path.suffix == ".npz":
        return _read_npz(path)
    return _read_ndjson(path)


class SeriesTable(BaseModel):
    """Plot-ready table: one row per frame or event."""
    name: str
    columns: list[str]
    rows: list[list[Any]]

    def column(self, name: str) -> list[Any]:
        index = self.columns.index(name)
        return [row[index] for row in self.rows]


class Analysis(BaseModel):
    """Result of :func:`analyze`."""
    summary: dict[str, Any]
    tables: dict[str, SeriesTable] = Field(default_factory=dict)
    values: dict[str, float] = Field(default_factory=dict)


def _summary(record: TrajectoryRecord) -> dict[str, Any]:
    times = record.times()
    return {
        "frames": len(record.frames),
        "events": len(record.events),
        "t_start_fs": float(au_to_fs(times[0])) if len(times) else None,
        "t_end_fs": float(au_to_fs(times[-1])) if len(times) else None,
        "schema_version": record.header.schema_version,
        "warnings": sum(1 for frame in record.frames if frame.warnings),
    }


def _series(name: str, record: TrajectoryRecord, labels: Sequence[str],
            values: Iterable[Sequence[float]]) -> SeriesTable:
    rows = [[float(au_to_fs(frame.t)), *map(float, row)]
            for frame, row in zip(record.frames, values)]
    return SeriesTable(name=name, columns=["t_fs", *labels], rows=rows)


def absorbed_energy(record: TrajectoryRecord) -> float:
    """E_total after the pulse minus E_total before it."""
    if not record.frames:
        raise ValueError("record has no frames")
    times = record.times()
    energy = record.column("e_total")
    before, after = 0, len(times) - 1
    if record.header.pulse_window is not None:
        start, end = record.header.pulse_window
        earlier = np.nonzero(times <= start)[0]
        later = np.nonzero(times >= end)[0]
        before = int(earlier[-1]) if len(earlier) else 0
        after = int(later[0]) if len(later) else len(times) - 1
    return float(energy[after] - energy[before])


def _rabi_model(t: np.ndarray, amplitude: float, omega: float, shift: float) -> np.ndarray:
    return amplitude * np.sin(0.5 * omega * (t - shift)) ** 2


def fitted_period(times: np.ndarray, population: np.ndarray) -> float:
    """Period 2 pi / Omega of an oscillation A sin^2(Omega (t - t0) / 2).

    The FFT peak of the population seeds the least-squares fit.
    """
    times = np.asarray(times, dtype=float)
    population = np.asarray(population, dtype=float)
    if len(times) < 8:
        raise ValueError("need at least 8 samples to fit a period")
    spacing = float(np.mean(np.diff(times)))
    spectrum = np.abs(np.fft.rfft(population - population.mean()))
    frequencies = np.fft.rfftfreq(len(population), spacing)
    peak = int(np.argmax(spectrum[1:])) + 1
    guess = 2.0 * np.pi * frequencies[peak]
    params, _ = curve_fit(_rabi_model, times, population,
                          p0=(max(float(population.max()), 1e-6), guess, times[0]))
    return float(2.0 * np.pi / abs(params[1]))


def analyze(record_path: Union[str, Path], queries: Sequence[str] = ()) -> Analysis:
    """Summaries and plot-ready series of a record.

    Args:
        record_path: NDJSON or npz record
        queries: Any of ``QUERIES``; empty gives the summary only

    Raises:
        ValueError: For an unknown query
        SchemaVersionError: For an unsupported record
    """
    unknown = [q for q in queries if q not in QUERIES]
    if unknown:
        raise ValueError(f"Unsupported query: '{unknown[0]}'. Available queries: {', '.join(QUERIES)}")
    record = read_record(record_path)
    result = Analysis(summary=_summary(record))
    frames = record.frames
    levels = [f"P{i}" for i in range(record.header.levels)]

    for query in queries:
        if query == "populations":
            result.tables[query] = _series(query, record, levels, (f.populations for f in frames))
        elif query == "orbitals":
            orbitals = len(frames[0].orbital_populations) if frames else 0
            labels = record.header.orbitals or [f"q{i}" for i in range(orbitals)]
            result.tables[query] = _series(query, record, labels,
                                           (f.orbital_populations for f in frames))
        elif query == "gaps":
            count = max(record.header.levels - 1, 0)
            result.tables[query] = _series(query, record, [f"gap{i}_{i + 1}" for i in range(count)],
                                           (np.diff(f.eigenvalues) for f in frames))
        elif query == "norms":
            states = len(frames[0].norms) if frames else 0
            labels = [f"norm{n}" for n in range(states)] + ["bound_norm", "cross_overlap"]
            result.tables[query] = _series(query, record, labels,
                                           ([*f.norms, f.bound_norm, f.cross_overlap] for f in frames))
        elif query == "energy":
            result.tables[query] = _series(
                query, record, ["e_total", "e_kinetic", "e_electronic", "e_repulsion"],
                ([f.e_total, f.e_kinetic, f.e_electronic, f.e_repulsion] for f in frames))
        elif query == "absorbed_energy":
            result.values[query] = absorbed_energy(record)
        elif query == "ionization":
            states = len(frames[0].transferred) if frames else 0
            labels = [f"ionized{n}" for n in range(states)] + ["ionized_total"]
            result.tables[query] = _series(query, record, labels,
                                           ([*f.transferred, sum(f.transferred)] for f in frames))
        elif query == "branches":
            rows = []
            for event in record.events:
                branches = enumerate_branches(event, record.header.threshold)
                rows.append([event.index, float(au_to_fs(event.t)), event.trigger, event.policy,
                             event.chosen, [i for i, _ in branches], [w for _, w in branches],
                             event.checkpoint])
            result.tables[query] = SeriesTable(
                name=query, rows=rows,
                columns=["event", "t_fs", "trigger", "policy", "chosen", "branches",
                         "weights", "checkpoint"])
        elif query == "period":
            if record.header.levels < 2:
                raise ValueError("period needs at least two adiabatic levels")
            electrons = sum(record.header.occupations) or 1.0
            population = np.array([f.populations[1] for f in frames]) / electrons
            period = fitted_period(record.times(), population)
            result.values["period"] = period
            result.values["period_fs"] = float(au_to_fs(period))
    logger.debug("Analyzed %s with queries %s", record_path, list(queries))
    return result
