"""Entry point for the local backend's cluster daemon: ``python -m dsomething.daemon RUN_DIR``."""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

from .backends import LocalBackend, LocalOptions


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    run_dir = Path(argv[0])
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(threadName)s %(message)s")
    run = json.loads((run_dir / "run.json").read_text())
    backend = LocalBackend(run_dir, LocalOptions.from_dict(run.get("backend_options")))
    backend.run_daemon()
    return 0


if __name__ == "__main__":
    sys.exit(main())
