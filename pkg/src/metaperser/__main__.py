import sys

from metaperser.cli import main

sys.exit(main())
