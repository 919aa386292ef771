"""Shared rich consoles used by the CLI and the cycle runner."""

from rich.console import Console

console = Console()
err_console = Console(stderr=True)


def set_quiet(quiet: bool) -> None:
    """Silence progress and summaries; errors still reach stderr."""
    console.quiet = quiet
