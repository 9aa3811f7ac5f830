#!/usr/bin/env python3
"""
Command-line entry point for the cloudlet overlay simulator.
Run `python run.py --help` for the available commands.
"""
import sys

from cli import main

if __name__ == '__main__':
    sys.exit(main())
