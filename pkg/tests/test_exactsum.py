"""Error-free accumulation: expansions behave like exact real sums."""

from __future__ import annotations

import math
import random

from hypothesis import given
from hypothesis import strategies as st

from fedsum.exactsum import add_partial, merge_partials, round_partials

# Bounded so that no intermediate or final sum can overflow float64.
bounded_floats = st.floats(
    min_value=-1e290, max_value=1e290, allow_nan=False, allow_infinity=False
)
float_lists = st.lists(bounded_floats, max_size=80)


def expansion(values):
    partials: list[float] = []
    for v in values:
        add_partial(partials, v)
    return partials


def test_empty_rounds_to_zero():
    assert round_partials([]) == 0.0


def test_single_value_round_trip():
    assert round_partials(expansion([3.5])) == 3.5


def test_catastrophic_cancellation_is_exact():
    # Plain left-to-right float addition loses the 1.0 here.
    values = [1e16, 1.0, -1e16]
    assert sum(values) == 0.0
    assert round_partials(expansion(values)) == 1.0


def test_tenths_match_fsum():
    values = [0.1] * 10
    assert round_partials(expansion(values)) == math.fsum(values)


@given(float_lists)
def test_round_matches_fsum(values):
    assert round_partials(expansion(values)) == math.fsum(values)


@given(float_lists, st.randoms(use_true_random=False))
def test_order_invariance(values, rng):
    shuffled = list(values)
    rng.shuffle(shuffled)
    assert round_partials(expansion(shuffled)) == round_partials(
        expansion(values)
    )


@given(float_lists, st.integers(min_value=0, max_value=80))
def test_merge_matches_sequential(values, cut_at):
    cut = min(cut_at, len(values))
    left = expansion(values[:cut])
    right = expansion(values[cut:])
    merge_partials(left, right)
    assert round_partials(left) == round_partials(expansion(values))


@given(float_lists)
def test_partials_stay_compact_and_exact(values):
    partials = expansion(values)
    # Residues of zero are squeezed out as they appear, so only the
    # most significant slot may hold a zero.
    assert all(p != 0.0 for p in partials[:-1])
    assert all(math.isfinite(p) for p in partials)
    # The partial list carries the exact sum: collapsing it is the same
    # as correctly rounding the original inputs.
    assert math.fsum(partials) == math.fsum(values)


def test_many_random_groupings_agree():
    rng = random.Random(7)
    values = [rng.uniform(-1e9, 1e9) for _ in range(500)]
    values += [rng.uniform(-1e-9, 1e-9) for _ in range(500)]
    reference = round_partials(expansion(values))
    for _ in range(10):
        shuffled = list(values)
        rng.shuffle(shuffled)
        chunks = []
        i = 0
        while i < len(shuffled):
            width = rng.randrange(1, 60)
            chunks.append(expansion(shuffled[i : i + width]))
            i += width
        total: list[float] = []
        rng.shuffle(chunks)
        for chunk in chunks:
            merge_partials(total, chunk)
        assert round_partials(total) == reference
