"""Named deterministic random streams.

Every stochastic operation in the package draws from a Philox
(counter-based) generator derived from ``(seed, stream tag, *extra)``.
Streams with distinct tags are statistically independent, replays with
the same tuple are bit-identical, and nothing depends on global RNG
state.  Training derives one stream per (purpose, iteration), so a run
can be resumed from any iteration without serializing generator state.
"""

import numpy as np

# Stream tags.  Values are part of the on-disk reproducibility contract:
# changing them changes every downstream draw.
INIT = 1          # model weight initialization
BATCH = 2         # labelled/unlabelled batch selection
AUG = 3           # cutout/cutmix/classmix draws
RECO = 4          # query/key sampling
FLIP = 5          # horizontal flips and crops
GENERATE = 6      # synthetic image synthesis
PARTITION = 7     # dataset partitioning


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, *path)``."""
    ss = np.random.SeedSequence([int(seed)] + [int(p) for p in path])
    return np.random.Generator(np.random.Philox(ss))
