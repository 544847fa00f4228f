"""``python -m modkit`` dispatches to the command-line runner."""

from .cli import main

if __name__ == "__main__":
    raise SystemExit(main())
