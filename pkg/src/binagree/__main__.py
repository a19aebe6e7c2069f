"""Entry point for ``python -m binagree``."""

from .cli import main

raise SystemExit(main())
