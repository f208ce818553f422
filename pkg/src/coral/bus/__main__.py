"""``python -m coral.bus --listen HOST:PORT`` runs a standalone broker."""

from coral.bus.broker import main

raise SystemExit(main())
