#!/usr/bin/env python3
"""Root launcher for the flexfl command line."""

from flexfl.main import main


if __name__ == "__main__":
    raise SystemExit(main())
