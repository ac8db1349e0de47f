import sys
from pathlib import Path

# test modules share a few scene helpers
sys.path.insert(0, str(Path(__file__).parent))
