import sys

from spidernet.cli import main

sys.exit(main())
