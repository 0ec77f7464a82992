import sys

from morphence.cli import main

sys.exit(main())
