import sys

from thinner.cli import main

sys.exit(main())
