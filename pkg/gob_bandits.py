#!/usr/bin/env python3
"""
Gang of Bandits - Entry point script

This script serves as the main entry point for the simulation harness.
It imports and runs the main function from the src.main module.
"""

import sys

from src.main import main

if __name__ == "__main__":
    sys.exit(main())
