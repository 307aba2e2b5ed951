#!/usr/bin/env python3
"""
Continual Distillation Lab
Main entry point for the command-line application
"""

import sys

from cli.app import run_cli


def main():
    """Main application entry point"""
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
