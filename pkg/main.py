#!/usr/bin/env python3
import sys

from src.cli import run_app

if __name__ == "__main__":
    try:
        sys.exit(run_app())
    except KeyboardInterrupt:
        print("\nInterrupted.")
        sys.exit(130)
