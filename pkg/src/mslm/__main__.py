"""``python -m mslm``."""

from mslm.cli import main

raise SystemExit(main())
