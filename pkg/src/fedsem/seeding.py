"""Deterministic RNG substreams derived from one master seed.

Every random decision in a run is drawn from a generator keyed by
``(master_seed, purpose, *path)`` where ``path`` is a tuple of small
integers such as (round, device, epoch, batch).  The split goes through
``numpy.random.SeedSequence`` with the full tuple as entropy, which acts
as a counter-based split: streams for different keys are independent,
and adding devices or rounds never perturbs the streams of existing
keys.
"""

from enum import IntEnum

import numpy as np


class Purpose(IntEnum):
    """Namespace tags for RNG substreams."""

    INIT = 0          # global model weight init
    DATA = 1          # training scene synthesis
    TEST_DATA = 2     # held-out scene synthesis
    TEACHER = 3       # teacher init + training shuffles
    SHUFFLE = 4       # per-(round, device, epoch) batch order
    CHANNEL = 5       # per-batch fading draw
    PILOT_NOISE = 6   # per-batch pilot noise
    DATA_NOISE = 7    # per-batch payload noise
    EVAL_CHANNEL = 8  # per-round evaluation fading draws
    EVAL_NOISE = 9    # per-round evaluation noise
    CSI_SAMPLES = 10  # refiner pretraining channel sample set
    CSI_INIT = 11     # refiner weight init
    CSI_BATCH = 12    # refiner pretraining batch selection
    CSI_NOISE = 13    # refiner pretraining pilot noise
    GENERIC = 14


def substream(master_seed, purpose, *path):
    """Return a ``numpy.random.Generator`` for the given key.

    ``purpose`` is a :class:`Purpose` member (or any int); ``path``
    components must be non-negative integers.
    """
    entropy = (int(master_seed), int(purpose)) + tuple(int(p) for p in path)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
