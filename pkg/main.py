"""Main entry point for peierlsmd."""
import argparse
import logging
import sys
from typing import Optional, Sequence

from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape

from peierlsmd.core.branching import BranchPolicy
from peierlsmd.core.record import QUERIES, analyze
from peierlsmd.core.workflow import (
    NUM_THREADS_ENV_VAR,
    RunCallbacks,
    Simulation,
    checkpoint_branches,
    replay_branches,
)
from peierlsmd.errors import ConfigurationError, NumericalError, PeierlsMDError
from peierlsmd.model.factory import TableFactory
from peierlsmd.tools.oracles import list_fixtures, run_fixture
from peierlsmd.ui import render_analysis, render_branches, render_oracle

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

console = Console()


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse command line arguments.

    Returns:
        Parsed arguments
    """
    parser = argparse.ArgumentParser(
        description="peierlsmd - electron-nuclear dynamics driven by laser pulses",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"""
Examples:
  # Run a simulation and write its trajectory record
  python main.py run configs/dimer.toml

  # Population and energy series of a record
  python main.py analyze trajectory.ndjson populations energy

  # Events and branches of a record
  python main.py branches trajectory.ndjson

  # Continue from an event checkpoint on adiabatic branch 1
  python main.py resume checkpoints/event-000.npz --branch 1

  # Replay every branch above threshold in parallel
  python main.py resume checkpoints/event-000.npz --all-branches

  # Reference values
  python main.py oracle rabi

Environment Variables:
  {NUM_THREADS_ENV_VAR}   - Threads for branch replay (default: 1)
  {TableFactory.SPECIES_FILE_ENV_VAR}  - Species file used when a config names none
        """
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run a simulation")
    run.add_argument("config", help="TOML run configuration")

    analysis = commands.add_parser("analyze", help="Summaries and series of a record")
    analysis.add_argument("record", help="Trajectory record (.ndjson or .npz)")
    analysis.add_argument("queries", nargs="*", metavar="query",
                          help=f"Any of: {', '.join(QUERIES)}")
    analysis.add_argument("--rows", type=int, default=40, help="Rows shown per series")

    branches = commands.add_parser("branches", help="Branch events of a record")
    branches.add_argument("record", help="Trajectory record")

    resume = commands.add_parser("resume", help="Continue a run from a checkpoint")
    resume.add_argument("checkpoint", help="Checkpoint file (.npz)")
    group = resume.add_mutually_exclusive_group()
    group.add_argument("--branch", help="Adiabatic index, or a policy such as sampled(3)")
    group.add_argument("--all-branches", action="store_true",
                       help="Replay every branch above threshold")

    oracle = commands.add_parser("oracle", help="Print reference values")
    oracle.add_argument("fixture", choices=list_fixtures())

    return parser.parse_args(argv)


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), rich_tracebacks=verbose)],
        force=True,
    )


def _callbacks() -> RunCallbacks:
    return RunCallbacks(
        on_event=lambda event: console.print(
            escape(f"• event {event.index} ({event.trigger}) at t={event.t:.3f} a.u. -> {event.chosen}")),
        on_status_update=lambda message: logging.getLogger("peierlsmd").debug(message),
    )


def _branch_argument(text: Optional[str]):
    if text is None:
        return None
    if text.strip().lstrip("-").isdigit():
        return int(text)
    return BranchPolicy.parse(text)


def command_run(args: argparse.Namespace) -> int:
    simulation = Simulation.from_file(args.config)
    result = simulation.run(_callbacks())
    console.print(f"✓ {result.frames} frames, {len(result.events)} events -> {result.record_path}")
    return EXIT_OK


def command_analyze(args: argparse.Namespace) -> int:
    render_analysis(analyze(args.record, args.queries), console, args.rows)
    return EXIT_OK


def command_branches(args: argparse.Namespace) -> int:
    render_analysis(analyze(args.record, ["branches"]), console)
    return EXIT_OK


def command_resume(args: argparse.Namespace) -> int:
    if args.all_branches:
        available = checkpoint_branches(args.checkpoint)
        render_branches(available, f"branches of {args.checkpoint}", console)
        for result in replay_branches(args.checkpoint, [i for i, _ in available],
                                      callbacks=_callbacks()):
            console.print(f"✓ {result.frames} frames -> {result.record_path}")
        return EXIT_OK
    result = Simulation.resume(args.checkpoint, _branch_argument(args.branch)).run(_callbacks())
    console.print(f"✓ {result.frames} frames, {len(result.events)} events -> {result.record_path}")
    return EXIT_OK


def command_oracle(args: argparse.Namespace) -> int:
    render_oracle(args.fixture, run_fixture(args.fixture), console)
    return EXIT_OK


COMMANDS = {
    "run": command_run,
    "analyze": command_analyze,
    "branches": command_branches,
    "resume": command_resume,
    "oracle": command_oracle,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Dispatch a CLI command; exits 0 on success, 2 on bad input, 3 on numerical failure."""
    args = parse_args(argv)
    configure_logging(args.verbose)
    try:
        code = COMMANDS[args.command](args)
    except ConfigurationError as e:
        console.print(f"❌ Error: {escape(str(e))}")
        code = EXIT_CONFIG
    except NumericalError as e:
        console.print(f"❌ Error: {escape(str(e))}")
        if e.checkpoint:
            console.print(f"  last good checkpoint: {escape(e.checkpoint)}")
        code = EXIT_NUMERICAL
    except (PeierlsMDError, ValueError) as e:
        console.print(f"❌ Error: {escape(str(e))}")
        code = EXIT_CONFIG
    if argv is None:
        sys.exit(code)
    return code


if __name__ == "__main__":
    main()
