import sys

from cellini.csunet.cli import main

sys.exit(main())
