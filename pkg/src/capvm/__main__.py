from capvm.cli import main
import sys

sys.exit(main())
