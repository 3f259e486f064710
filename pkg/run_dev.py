import logging
import sys

from lesiontl.cli import main

if __name__ == '__main__':
    import coloredlogs
    coloredlogs.install(level=logging.DEBUG)
    sys.exit(main())
