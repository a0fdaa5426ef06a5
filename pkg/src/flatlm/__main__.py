from flatlm.cli import main
import sys

sys.exit(main())
