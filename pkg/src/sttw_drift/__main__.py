from sttw_drift.cli import main
import sys
sys.exit(main())
