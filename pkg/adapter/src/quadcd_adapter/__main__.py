from quadcd_adapter.cli import main

raise SystemExit(main())
