#!/usr/bin/env python3
"""
🚦 TAANP STARTUP SCRIPT
Runs the command line from a source checkout without installing the package
"""

import sys
from pathlib import Path


def setup_environment():
    """Put the repository root on the import path"""
    root = Path(__file__).parent
    if str(root) not in sys.path:
        sys.path.insert(0, str(root))


def main():
    setup_environment()
    from taanp.cli import main as cli_main

    sys.exit(cli_main())


if __name__ == "__main__":
    main()
