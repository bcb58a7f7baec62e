from fairfal.cli import main
import sys

sys.exit(main())
