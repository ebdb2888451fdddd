"""Main entry point for ``python -m mutual_taught``."""
import sys

from mutual_taught.cli import main

if __name__ == "__main__":
    sys.exit(main())
