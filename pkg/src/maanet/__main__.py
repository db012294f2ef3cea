from maanet.cli import main
import sys

sys.exit(main())
