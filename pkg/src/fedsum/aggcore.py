"""Ephemeral grouped-sum aggregation core.

A core holds the running grouped sums for one aggregation session: a map
from string group key to one float64 accumulator per value column, plus a
count of contributing updates.  Cores support exactly four operations —
accumulate, merge, can_report, report — and report consumes the core, so
per-device rows live only transiently while a window is collecting.

Accumulators keep exact expansions (see :mod:`fedsum.exactsum`), so any
way of sharding updates across cores and merging the partial cores yields
a bit-identical final state.  Malformed updates are rejected atomically:
the state and count are untouched unless every row validates.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from hashlib import blake2b

from .exactsum import add_partial, merge_partials, round_partials

__all__ = [
    "AggCoreConfig",
    "ClientUpdate",
    "MalformedUpdateError",
    "ReportBeforeThresholdError",
    "CoreConsumedError",
    "AggregationCore",
    "encode_payload",
    "decode_payload",
    "KEY_SEPARATOR",
]

# Group-key tuples are serialized to strings with this separator (the
# ASCII unit separator, which cannot appear in well-formed key parts).
KEY_SEPARATOR = "\x1f"

Rows = list[tuple[str, tuple[float, ...]]]


class MalformedUpdateError(ValueError):
    """An update failed validation; the core state was not modified."""


class ReportBeforeThresholdError(RuntimeError):
    """report() was called before the contribution threshold was met."""


class CoreConsumedError(RuntimeError):
    """An operation was attempted on a core that was already reported."""


@dataclass(frozen=True)
class AggCoreConfig:
    """Static configuration of a core: columns and the report gate."""

    key_columns: tuple[str, ...]
    value_columns: tuple[str, ...]
    contribution_threshold: int = 1

    def __post_init__(self) -> None:
        if not self.value_columns:
            raise ValueError("at least one value column is required")
        if self.contribution_threshold < 1:
            raise ValueError("contribution threshold must be >= 1")


@dataclass(frozen=True)
class ClientUpdate:
    """One device's grouped rows for one (query, window)."""

    query_id: str
    window_id: str
    token: str
    rows: tuple[tuple[str, tuple[float, ...]], ...]

    def encode(self) -> bytes:
        return encode_payload(list(self.rows))


class AggregationCore:
    """Mergeable grouped-sum state for one session (or one shard of it)."""

    __slots__ = ("config", "contribution_count", "_state", "_consumed")

    def __init__(self, config: AggCoreConfig) -> None:
        self.config = config
        self.contribution_count = 0
        # key -> list of expansions, one per value column
        self._state: dict[str, list[list[float]]] = {}
        self._consumed = False

    # -- operations ----------------------------------------------------

    def accumulate(self, rows: Rows) -> None:
        """Add one device update (validated atomically, count +1)."""
        self._check_live()
        ncols = len(self.config.value_columns)
        for row in rows:
            try:
                key, values = row
            except (TypeError, ValueError):
                raise MalformedUpdateError(f"row is not a (key, values) pair: {row!r}")
            if not isinstance(key, str):
                raise MalformedUpdateError(f"key must be a string, got {type(key).__name__}")
            if len(values) != ncols:
                raise MalformedUpdateError(
                    f"row for key {key!r} has {len(values)} values; "
                    f"expected {ncols}"
                )
            for v in values:
                if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
                    raise MalformedUpdateError(
                        f"non-finite or non-numeric value {v!r} for key {key!r}"
                    )
        state = self._state
        for key, values in rows:
            cell = state.get(key)
            if cell is None:
                state[key] = [[float(v)] for v in values]
                continue
            for i, v in enumerate(values):
                partials = cell[i]
                if len(partials) == 1:
                    # Inlined two-sum fast path for the common case.
                    x = float(v)
                    y = partials[0]
                    if abs(x) < abs(y):
                        x, y = y, x
                    hi = x + y
                    lo = y - (hi - x)
                    if lo:
                        partials[0] = lo
                        partials.append(hi)
                    else:
                        partials[0] = hi
                else:
                    add_partial(partials, float(v))
        self.contribution_count += 1

    def merge(self, other: "AggregationCore") -> None:
        """Fold another core into this one; the other core is consumed."""
        self._check_live()
        other._check_live()
        if other.config != self.config:
            raise ValueError("cannot merge cores with different configs")
        state = self._state
        for key, other_cell in other._state.items():
            cell = state.get(key)
            if cell is None:
                state[key] = [list(p) for p in other_cell]
            else:
                for mine, theirs in zip(cell, other_cell):
                    merge_partials(mine, theirs)
        self.contribution_count += other.contribution_count
        other._consume()

    def can_report(self) -> bool:
        self._check_live()
        return self.contribution_count >= self.config.contribution_threshold

    def report(self) -> dict[str, tuple[float, ...]]:
        """Final grouped sums; consumes the core.

        Raises :class:`ReportBeforeThresholdError` if the contribution
        threshold has not been met.  Values are the correctly rounded
        exact sums, keyed in insertion-independent (sorted) order.
        """
        self._check_live()
        if self.contribution_count < self.config.contribution_threshold:
            raise ReportBeforeThresholdError(
                f"{self.contribution_count} contributions < threshold "
                f"{self.config.contribution_threshold}"
            )
        result = {
            key: tuple(round_partials(p) for p in self._state[key])
            for key in sorted(self._state)
        }
        self._consume()
        return result

    # -- snapshots -------------------------------------------------------

    def serialize_state(self) -> bytes:
        """Canonical bytes of the observable state (for digests/tests).

        Sorted keys; per key one correctly rounded float64 per column;
        then the contribution count.  Two cores that accumulated the same
        multiset of updates serialize identically regardless of merge
        structure.
        """
        self._check_live()
        out = bytearray()
        out += struct.pack("<I", len(self._state))
        for key in sorted(self._state):
            kb = key.encode("utf-8")
            out += struct.pack("<I", len(kb))
            out += kb
            for partials in self._state[key]:
                out += struct.pack("<d", round_partials(partials))
        out += struct.pack("<q", self.contribution_count)
        return bytes(out)

    def state_digest(self) -> str:
        return blake2b(self.serialize_state(), digest_size=16).hexdigest()

    @property
    def consumed(self) -> bool:
        return self._consumed

    def _check_live(self) -> None:
        if self._consumed:
            raise CoreConsumedError("aggregation core was already consumed")

    def _consume(self) -> None:
        self._state = {}
        self._consumed = True

    def __repr__(self) -> str:
        status = "consumed" if self._consumed else f"{self.contribution_count} contributions"
        return f"AggregationCore({len(self._state)} keys, {status})"


# --------------------------------------------------------------------------
# Payload wire format
#
# varint row count; per row: varint key length, UTF-8 key bytes, then one
# little-endian float64 per value column.


def _write_varint(out: bytearray, n: int) -> None:
    if n < 0:
        raise ValueError("varint must be non-negative")
    while True:
        byte = n & 0x7F
        n >>= 7
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def _read_varint(data: bytes, offset: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if offset >= len(data):
            raise MalformedUpdateError("truncated varint in payload")
        byte = data[offset]
        offset += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, offset
        shift += 7
        if shift > 63:
            raise MalformedUpdateError("varint too long in payload")


def encode_payload(rows: Rows) -> bytes:
    """Serialize rows; every row must have the same number of values."""
    out = bytearray()
    _write_varint(out, len(rows))
    ncols = len(rows[0][1]) if rows else 0
    for key, values in rows:
        if len(values) != ncols:
            raise MalformedUpdateError("ragged rows in payload")
        kb = key.encode("utf-8")
        _write_varint(out, len(kb))
        out += kb
        out += struct.pack(f"<{len(values)}d", *values)
    return bytes(out)


def decode_payload(data: bytes, num_value_columns: int) -> Rows:
    count, offset = _read_varint(data, 0)
    rows: Rows = []
    width = 8 * num_value_columns
    for _ in range(count):
        klen, offset = _read_varint(data, offset)
        if offset + klen + width > len(data):
            raise MalformedUpdateError("truncated payload row")
        try:
            key = data[offset : offset + klen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedUpdateError(f"invalid UTF-8 in key: {exc}") from None
        offset += klen
        values = struct.unpack_from(f"<{num_value_columns}d", data, offset)
        offset += width
        rows.append((key, values))
    if offset != len(data):
        raise MalformedUpdateError("trailing bytes after payload rows")
    return rows
