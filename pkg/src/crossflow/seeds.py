"""Stable seed fan-out.

A child seed is the first 8 bytes of sha256 over the parent seed and a
path of labels, read big-endian and masked to 63 bits. It depends only on
those inputs, never on call order, so stages, sweep configs and single
images can be rerun in isolation.
"""

from __future__ import annotations

import hashlib


def derive_seed(seed: int, *labels: object) -> int:
    text = "/".join([str(int(seed))] + [str(label) for label in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)
