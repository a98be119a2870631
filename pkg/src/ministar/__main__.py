from ministar.app.cli import main

raise SystemExit(main())
