"""Splittable seed discipline.

One master seed derives every sub-stream through sha256 of
"master|part|part|...", so per-client, per-round, per-phase randomness is
independent of execution order and stable across processes.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *parts) -> int:
    text = "|".join([str(int(master))] + [str(p) for p in parts])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(master: int, *parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *parts))
