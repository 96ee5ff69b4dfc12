#!/usr/bin/env python3
"""
Trifle - entry point
"""
import sys

from eval_cli import main

if __name__ == "__main__":
    sys.exit(main())
