import sys

from amddx.cli import main

sys.exit(main())
