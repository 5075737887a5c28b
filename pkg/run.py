#!/usr/bin/env python3
"""
MoLRG Lab Startup Script
Runs one lab command, e.g. `python3 run.py phase --method pca --d 2..8 --num 2..15`
"""

import os
import sys
from pathlib import Path


def main():
    # Check Python version
    if sys.version_info < (3, 11):
        print(f"ERROR: Python 3.11+ required (you have {sys.version_info.major}.{sys.version_info.minor})")
        print("Please upgrade Python or use pyenv/venv with Python 3.11+")
        sys.exit(1)

    # Resolve the package from the script directory
    script_dir = Path(__file__).parent
    os.chdir(script_dir)
    sys.path.insert(0, str(script_dir))

    from src.cli import main as cli_main
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
