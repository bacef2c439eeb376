"""
Name: mpcfGapStats.py
Desc: See DESC string.

Note: LatentPrefPython raises LatentPrefException subclasses when an input or
configuration can't be used. This example terminates on the first one. See
LatentPrefPython.py for the error codes and their advice strings.
"""
import sys

import numpy as np

import denoiser
import mpcf
from tensor import RngStream


DESC = """
Generates a synthetic preference corpus and reports how the multi-preference
consistent filter treats it.

Each pair is labeled by the hidden reward (half aesthetics, half prompt
alignment) with some label noise, then scored on the three oracle dimensions.
The report shows how many pairs every strategy keeps, how many pairs count as
ties, the share of negative gaps per dimension and the gap histogram.

Usage: python mpcfGapStats.py [pairs] [seed]
"""

EDGES = [-1.5, -1.0, -0.5, -0.2, 0.0, 0.2, 0.5, 1.0, 1.5]

nPairs = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0

print(DESC)

config = denoiser.DenoiserConfig()
task = denoiser.SyntheticTask(config, RngStream(seed).derive("task"))
corpus = mpcf.generateCorpus(task, nPairs, RngStream(seed).derive("corpus"))
records = mpcf.scoreRecords(corpus)

print("%s scored pairs, latent shape %s" % (len(records), config.latentShape))
for strategy in (mpcf.STRATEGY1, mpcf.STRATEGY2, mpcf.STRATEGY3):
    kept = len(mpcf.filterWinlose(records, strategy))
    print("%-10s kept %5s (%.1f%%)" % (strategy.name, kept, 100.0 * kept / len(records)))
print("%-10s kept %5s" % ("tie", len(mpcf.filterTies(records))))

for dim in mpcf.DIMENSIONS:
    _, below = mpcf.gapHistogram(records, dim, EDGES)
    gaps = np.array([g.get(dim) for _, g in records])
    print("G_%s: %.1f%% below zero, mean %.4f" % (dim, 100.0 * below, gaps.mean()))

print("")
sys.stdout.write(mpcf.gapHistogramTable(records, EDGES))
