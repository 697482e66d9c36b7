"""
PFRP Runner
Run this script to use the command line without installing the package
"""

import sys

from pfrp.cli import main

if __name__ == "__main__":
    sys.exit(main())
