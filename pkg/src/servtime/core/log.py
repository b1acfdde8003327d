import logging

import click

_COLORS = {
    logging.DEBUG: "bright_black",
    logging.INFO: "cyan",
    logging.WARNING: "yellow",
    logging.ERROR: "red",
    logging.CRITICAL: "red",
}


class ClickHandler(logging.Handler):
    """Echo log records through click, warnings and errors on stderr."""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            message = self.format(record)
            click.secho(
                message,
                fg=_COLORS.get(record.levelno),
                err=record.levelno >= logging.WARNING,
            )
        except Exception:
            self.handleError(record)


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO

    root = logging.getLogger("servtime")
    # re-entrant: CliRunner invokes the group many times in one process
    for handler in list(root.handlers):
        if isinstance(handler, ClickHandler):
            root.removeHandler(handler)

    handler = ClickHandler()
    handler.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(handler)
    root.setLevel(level)
