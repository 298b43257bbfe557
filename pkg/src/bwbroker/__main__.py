"""``python -m bwbroker``."""

from __future__ import annotations

import sys

from bwbroker.cli import main

if __name__ == "__main__":
    sys.exit(main())
