from __future__ import annotations

import sys

from restless_bai.cli.parser import main

if __name__ == "__main__":
    sys.exit(main())
