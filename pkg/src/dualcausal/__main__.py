import sys

from .evalcli import main

sys.exit(main())
