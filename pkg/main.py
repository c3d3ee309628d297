"""Entry point for the charcoal-rot band selector command line."""

from __future__ import annotations

import sys

from ui.cli import main as cli_main


def main() -> int:
    """Run the command line with the process arguments."""
    return cli_main(sys.argv[1:])


if __name__ == "__main__":
    raise SystemExit(main())
