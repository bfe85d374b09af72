from cdisrad.cli import main

raise SystemExit(main())
