import sys

from miqa.cli import main

sys.exit(main())
