import sys

from netflow.main import main

sys.exit(main())
