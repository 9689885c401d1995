import sys

from facegeom.cli import main

sys.exit(main())
