"""Named sub-stream derivation from a single root seed.

Every source of randomness in a run (corpus generation, perturbation,
parameter init, MLM masking, batch sampling) draws from its own stream
derived from (root seed, stream name), so runs are reproducible and
streams never alias each other.
"""

from __future__ import annotations

import hashlib
import random


def substream_seed(root: int, *names: object) -> int:
    """Derive a 63-bit child seed from a root seed and a name path."""
    key = str(root) + "/" + "/".join(str(n) for n in names)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def substream(root: int, *names: object) -> random.Random:
    """A `random.Random` seeded from the named sub-stream."""
    return random.Random(substream_seed(root, *names))
