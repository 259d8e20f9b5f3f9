"""Rich rendering of analysis results, branch manifests and oracle values."""
from typing import Any, Iterable, Mapping, Optional

from rich.console import Console
from rich.table import Table
from rich.text import Text

from peierlsmd.core.record import Analysis, SeriesTable
from peierlsmd.tools.oracles import OracleResult


MAX_ROWS = 40


def format_cell(value: Any) -> str:
    """Compact text for one table cell."""
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(format_cell(v) for v in value) + "]"
    if value is None:
        return "-"
    return str(value)


def _thin(rows: list[list[Any]], limit: int) -> list[list[Any]]:
    """Evenly spaced subset of at most ``limit`` rows, always keeping the last."""
    if len(rows) <= limit:
        return rows
    stride = -(-len(rows) // limit)
    kept = rows[::stride]
    if kept[-1] is not rows[-1]:
        kept.append(rows[-1])
    return kept


def series_table(series: SeriesTable, limit: int = MAX_ROWS) -> Table:
    table = Table(title=series.name, show_lines=False)
    for column in series.columns:
        table.add_column(column, justify="right")
    for row in _thin(series.rows, limit):
        table.add_row(*(Text(format_cell(v)) for v in row))
    return table


def summary_table(summary: Mapping[str, Any], title: str = "record") -> Table:
    table = Table(title=title)
    table.add_column("key")
    table.add_column("value", justify="right")
    for key, value in summary.items():
        table.add_row(Text(key), Text(format_cell(value)))
    return table


def render_analysis(analysis: Analysis, console: Optional[Console] = None,
                    limit: int = MAX_ROWS) -> None:
    """Print the summary, every requested series and scalar values."""
    console = console or Console()
    console.print(summary_table(analysis.summary))
    for series in analysis.tables.values():
        console.print(series_table(series, limit))
    if analysis.values:
        console.print(summary_table(analysis.values, title="values"))


def oracle_table(name: str, results: Mapping[str, OracleResult]) -> Table:
    """One row per value: label, value, error estimate and method."""
    table = Table(title=f"oracle: {name}")
    for column in ("quantity", "abscissa", "value", "error", "method"):
        table.add_column(column, justify="left" if column in ("quantity", "method") else "right")
    for quantity, result in results.items():
        values = result.array
        for index, value in enumerate(values):
            label = result.labels[index] if index < len(result.labels) else str(index)
            abscissa = result.abscissa[index] if index < len(result.abscissa) else None
            text = f"{value:.10g}" if not isinstance(value, complex) else \
                f"{value.real:.10g}{value.imag:+.10g}j"
            table.add_row(Text(f"{quantity} {label}"), format_cell(abscissa), text,
                          f"{result.errors[index]:.1e}", Text(result.method))
    return table


def render_oracle(name: str, results: Mapping[str, OracleResult],
                  console: Optional[Console] = None) -> None:
    (console or Console()).print(oracle_table(name, results))


def render_branches(rows: Iterable[tuple[int, float]], title: str,
                    console: Optional[Console] = None) -> None:
    table = Table(title=title)
    table.add_column("branch", justify="right")
    table.add_column("weight", justify="right")
    for index, weight in rows:
        table.add_row(str(index), f"{weight:.6f}")
    (console or Console()).print(table)
