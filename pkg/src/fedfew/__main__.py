import sys

from fedfew.cli import main

sys.exit(main())
