import sys

from dlkd.cli import main

sys.exit(main())
