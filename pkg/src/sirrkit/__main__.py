import sys

from sirrkit.cli import main

sys.exit(main())
