import sys

from cbmr.cli import main

sys.exit(main())
