"""Allow ``python -m gpff``."""

import sys

from .cli import main

sys.exit(main())
