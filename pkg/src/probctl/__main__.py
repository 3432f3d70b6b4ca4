import sys

from probctl.cli import main

sys.exit(main())
