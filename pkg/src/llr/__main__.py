import sys

from llr.harness.cli import main

sys.exit(main())
