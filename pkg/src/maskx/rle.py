"""Run-length codec for binary masks in row-major order.

Counts alternate 0-runs and 1-runs and always start with a (possibly
empty) 0-run.
"""

import numpy as np


def encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return counts


def decode(counts, shape: tuple[int, int]) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    if (counts < 0).any():
        raise ValueError("run lengths must be non-negative")
    total = int(np.prod(shape))
    if counts.sum() != total:
        raise ValueError(f"run lengths sum to {counts.sum()}, expected {total}")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(shape)


def to_string(counts) -> str:
    return " ".join(str(int(c)) for c in counts)


def from_string(text: str) -> list[int]:
    return [int(tok) for tok in text.split()]
