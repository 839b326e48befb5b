"""Labelled seed derivation: every random stream fans out from one master seed."""

from __future__ import annotations

import hashlib
import random

import numpy as np


def derive_seed(master: int, *labels) -> int:
    h = hashlib.sha256(repr((int(master),) + tuple(labels)).encode())
    return int.from_bytes(h.digest()[:8], "big")


def np_rng(master: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *labels))


def py_rng(master: int, *labels) -> random.Random:
    return random.Random(derive_seed(master, *labels))
