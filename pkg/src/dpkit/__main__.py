import sys

from dpkit.harness.cli import main

sys.exit(main())
