import sys

from der.cli import main

sys.exit(main())
