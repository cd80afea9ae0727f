"""Deterministic seed derivation.

All randomness in a run funnels through one base seed; sub-streams (per task,
per stage, per epoch) are derived by hashing string tags so adding a new
consumer never perturbs existing streams.
"""

from __future__ import annotations

import hashlib

__all__ = ["derive_seed"]


def derive_seed(base: int, *tags: object) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest(), "little") % (2**63)
