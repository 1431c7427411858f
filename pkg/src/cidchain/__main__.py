import sys

from cidchain.cli import main

sys.exit(main())
