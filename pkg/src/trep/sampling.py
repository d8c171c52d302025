"""Overlapping random crops for two-view training.

Each training step draws one crop tuple (a1, a2, b1, b2) shared by the
whole batch, with 0 <= a1 <= a2 < b1 <= b2 <= T. View one is [a1, b1),
view two is [a2, b2), and the nonempty overlap [a2, b1) is where the
agreement losses operate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

MIN_VIEW_LEN = 2  # temporal contrast needs at least two candidate steps


@dataclass
class ContextPair:
    """Two cropped views of a batch plus overlap bookkeeping.

    ``view1`` and ``view2`` are slices of the same underlying batch (no
    copies). Overlap columns are available in each view's local
    coordinates via the helper slices below.
    """

    view1: np.ndarray
    view2: np.ndarray
    a1: int
    a2: int
    b1: int
    b2: int

    @property
    def overlap_len(self) -> int:
        return self.b1 - self.a2

    @property
    def view1_overlap(self) -> slice:
        return slice(self.a2 - self.a1, self.b1 - self.a1)

    @property
    def view2_overlap(self) -> slice:
        return slice(0, self.b1 - self.a2)

    @property
    def overlap_indices(self) -> np.ndarray:
        return np.arange(self.a2, self.b1)


def sample_crops(t_len: int, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Draw (a1, a2, b1, b2) with a nonempty overlap and views of length >= 2.

    The overlap [a2, b1) is drawn first (uniform over admissible nonempty
    intervals), then the left end extends view one and the right end view
    two, so no rejection loop is needed. At t_len == 2 the only admissible
    tuple is (0, 0, 2, 2).
    """
    if t_len < MIN_VIEW_LEN:
        raise DataError(f"series length {t_len} < {MIN_VIEW_LEN}; cannot crop two views")
    a2 = int(rng.integers(0, t_len - 1))          # <= T-2 so view2 can reach length 2
    b1 = int(rng.integers(max(a2 + 1, 2), t_len + 1))
    a1 = int(rng.integers(0, min(a2, b1 - 2) + 1))
    b2 = int(rng.integers(max(b1, a2 + 2), t_len + 1))
    return a1, a2, b1, b2


def make_context_pair(batch: np.ndarray, rng: np.random.Generator) -> ContextPair:
    """Slice one crop tuple out of a (B, T, C) batch."""
    if batch.ndim != 3:
        raise DataError(f"expected a (B, T, C) batch, got shape {batch.shape}")
    a1, a2, b1, b2 = sample_crops(batch.shape[1], rng)
    return ContextPair(
        view1=batch[:, a1:b1, :],
        view2=batch[:, a2:b2, :],
        a1=a1, a2=a2, b1=b1, b2=b2,
    )
