"""
Tweet Geolocation Density - command-line entry point
Generate synthetic corpora, train CMDN and its baselines, evaluate and predict

    python main.py gen-data --out data/
    python main.py train --data data/ --model cmdn --out runs/cmdn
    python main.py eval --checkpoint runs/cmdn/model.npz --sweep --hist
"""

import sys

from tweet_geodensity.cli import main

if __name__ == "__main__":
    sys.exit(main())
