import sys

from nvkm.cli import main

sys.exit(main())
