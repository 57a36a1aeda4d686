import sys

from relfn.cli import main

sys.exit(main())
