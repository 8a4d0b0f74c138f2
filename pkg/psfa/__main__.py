#!/usr/bin/env python3
"""
psfa - Main CLI Entry Point
Allows running: python -m psfa <arguments>
"""

import sys
from . import cli

if __name__ == "__main__":
    sys.exit(cli())
