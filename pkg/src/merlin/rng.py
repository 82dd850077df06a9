"""Counter-based random streams.

Every stochastic step draws from its own Philox stream keyed by the run seed
and a tuple of labels, e.g. ``stream(seed, "base", task, model)``. Streams do
not depend on call order, so adding a draw in one place never shifts another.
"""
import zlib

import numpy as np


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode())


def stream(seed: int, *labels) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF] + [_label_key(lab) for lab in labels]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
