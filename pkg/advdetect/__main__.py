from advdetect.cli import main

raise SystemExit(main())
