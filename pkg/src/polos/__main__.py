import sys

from polos.cli import main

sys.exit(main())
