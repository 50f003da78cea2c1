"""
CLI router: argv -> RunConfig -> subcommand handler.

Every failure leaves as one "<CODE>: <message>" line on stderr and exit
code 1.
"""
import sys
from typing import Any, Dict, Optional, Sequence

from app.cli.commands import HANDLERS
from app.cli.responses import format_summary
from app.cli.utils import build_parser, build_run_config, parse_argv
from app.core.exceptions import PhaseKitError
from app.core.settings import status, threads
from app.schemas.config import RunConfig


def dispatch(run: RunConfig) -> Dict[str, Any]:
    """Run the handler for run.command and return its status dict."""
    status(f"\n🧠 ROUTER: {run.command}")
    status(f"   → Routing to: {HANDLERS[run.command].__name__}")
    result = HANDLERS[run.command](run)
    if result.get("status") != "success":
        raise PhaseKitError(result.get("message", f"{run.command} failed"))
    return result


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        parsed = parse_argv(argv)
        if parsed is None:
            build_parser().print_usage()
            return 2
        run = build_run_config(parsed)
        threads()
        result = dispatch(run)
    except PhaseKitError as exc:
        print(f"{exc.code}: {exc.message}", file=sys.stderr)
        return 1
    status(format_summary(run.command, result))
    return 0
