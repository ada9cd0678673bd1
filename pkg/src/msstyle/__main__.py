import sys

from msstyle.cli import main

sys.exit(main())
