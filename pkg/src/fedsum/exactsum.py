"""Error-free accumulation of float64 values.

Running sums are kept as lists of non-overlapping partials (Shewchuk's
expansion representation, the same scheme ``math.fsum`` uses internally).
The partials represent the *exact* real-valued sum of everything added so
far, so accumulation is associative and commutative: any grouping of the
same inputs yields the same exact value, and rounding that value to a
single float64 at the end is deterministic.  This is what makes merged
aggregates reproducible regardless of how work was batched or which order
partial results arrived in.
"""

from __future__ import annotations

import math

__all__ = ["add_partial", "merge_partials", "round_partials"]


def add_partial(partials: list[float], x: float) -> None:
    """Add ``x`` into an expansion in place, preserving the exact sum.

    ``partials`` remains a list of non-overlapping floats sorted by
    increasing magnitude whose exact sum equals the old exact sum plus
    ``x``.  Typical lists stay 1-3 elements long for well-scaled data.
    """
    i = 0
    for y in partials:
        if abs(x) < abs(y):
            x, y = y, x
        hi = x + y
        lo = y - (hi - x)
        if lo:
            partials[i] = lo
            i += 1
        x = hi
    partials[i:] = [x]


def merge_partials(dst: list[float], src: list[float]) -> None:
    """Fold another expansion into ``dst`` in place (exact)."""
    for x in src:
        add_partial(dst, x)


def round_partials(partials: list[float]) -> float:
    """Collapse an expansion to the correctly rounded float64 sum."""
    if not partials:
        return 0.0
    if len(partials) == 1:
        return partials[0]
    return math.fsum(partials)
