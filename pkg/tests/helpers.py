"""Hand-rolled reference implementations used as independent oracles.

Nothing here imports the code paths it checks: grouped sums use plain
dicts and ``math.fsum``, calendar math uses :mod:`datetime` directly, and
query rejection cases are written out as literal text.
"""

from __future__ import annotations

import math
from datetime import datetime, timezone

from fedsum.model import (
    METRIC_DISTANCE,
    METRIC_DURATION,
    METRIC_NUM_TRIPS,
    TripRecord,
)

# Monday 2024-05-13 00:00:00 UTC — the default fleet start.
START = 1_715_558_400
WEEK = 7 * 86_400


def trip(
    device_id: int = 0,
    t: int = START + 3_600,
    a: int = 0,
    r: int = 0,
    d: int = 0,
    km: float = 1.0,
    s: float = 60.0,
) -> TripRecord:
    return TripRecord(
        device_id=device_id,
        event_time=t,
        activity=a,
        region=r,
        direction=d,
        distance_km=km,
        duration_s=s,
    )


def utc_ts(year, month, day, hour=0, minute=0, second=0) -> int:
    return int(
        datetime(year, month, day, hour, minute, second, tzinfo=timezone.utc).timestamp()
    )


def iso_week_id(ts: int) -> str:
    """Calendar-library ISO week label for the day containing ``ts``."""
    day = datetime.fromtimestamp(ts, tz=timezone.utc).date()
    year, week, _ = day.isocalendar()
    return f"{year}-W{week:02d}"


def naive_grouped_sums(updates):
    """Brute-force group-by-sum over update row lists (dict + fsum)."""
    by_key: dict[str, list[tuple[float, ...]]] = {}
    for rows in updates:
        for key, values in rows:
            by_key.setdefault(key, []).append(tuple(values))
    out = {}
    for key, vectors in by_key.items():
        columns = len(vectors[0])
        out[key] = tuple(
            math.fsum(vec[c] for vec in vectors) for c in range(columns)
        )
    return out


def naive_workload(corpus, window) -> dict[tuple[int, int, int, int], float]:
    """Two-level grouped sums straight off the records.

    Mirrors the pipeline's definition — per-device running totals in
    record order, then a correctly rounded sum across devices — using
    plain dicts and ``math.fsum`` only.
    """
    per_cell: dict[tuple[int, int, int, int], list[float]] = {}
    for device in corpus.devices:
        device_cells: dict[tuple[int, int, int, int], float] = {}
        for rec in device.records:
            if not window.start <= rec.event_time < window.end:
                continue
            for metric, value in (
                (METRIC_NUM_TRIPS, 1.0),
                (METRIC_DISTANCE, rec.distance_km),
                (METRIC_DURATION, rec.duration_s),
            ):
                cell = (rec.activity, metric, rec.region, rec.direction)
                device_cells[cell] = device_cells.get(cell, 0.0) + value
        for cell, subtotal in device_cells.items():
            per_cell.setdefault(cell, []).append(subtotal)
    return {
        cell: total
        for cell, subtotals in per_cell.items()
        if (total := math.fsum(subtotals)) != 0.0
    }


# ---------------------------------------------------------------------------
# Malformed split queries, each annotated with the class that must reject it.

_CLIENT_OK = (
    "SELECT activity, region, direction, privacy_time_unit, "
    "SUM(trip_count) AS c FROM DeviceDataStream "
    "GROUP BY activity, region, direction, privacy_time_unit"
)
_SERVER_OK = (
    "SELECT activity, region, direction, privacy_time_unit, "
    "SUM(c) AS s FROM UserResults "
    "GROUP BY activity, region, direction, privacy_time_unit"
)


def _pair(client: str, server: str) -> str:
    return f"{client}\n\n{server}\n"


def malformed_query_cases() -> list[tuple[str, str, type]]:
    """Fifty rejected splits: (label, query text, expected error class)."""
    from fedsum.query import (
        MissingPrivacyTimeUnitError,
        NonAggregatingQueryError,
        UnknownColumnError,
        UnsupportedAggregateError,
    )

    cases: list[tuple[str, str, type]] = []

    def add(label: str, text: str, err: type) -> None:
        cases.append((label, text, err))

    # --- no GROUP BY / raw column without aggregation ------------------
    for col in ("region", "activity", "direction", "privacy_time_unit", "s"):
        add(
            f"server-select-{col}-ungrouped",
            _pair(_CLIENT_OK, f"SELECT {col} FROM UserResults"),
            NonAggregatingQueryError,
        )
    add(
        "client-no-group-by",
        _pair(
            "SELECT region, SUM(trip_count) AS c FROM DeviceDataStream",
            _SERVER_OK,
        ),
        NonAggregatingQueryError,
    )
    add(
        "client-raw-column-outside-group",
        _pair(
            "SELECT region, direction, SUM(trip_count) AS c "
            "FROM DeviceDataStream GROUP BY region",
            _SERVER_OK,
        ),
        NonAggregatingQueryError,
    )
    add(
        "server-raw-column-outside-group",
        _pair(
            _CLIENT_OK,
            "SELECT activity, c FROM UserResults GROUP BY activity",
        ),
        NonAggregatingQueryError,
    )
    add(
        "server-no-group-by-with-sum",
        _pair(_CLIENT_OK, "SELECT SUM(c) AS s FROM UserResults"),
        NonAggregatingQueryError,
    )
    add(
        "client-no-group-by-with-sum",
        _pair("SELECT SUM(trip_count) AS c FROM DeviceDataStream", _SERVER_OK),
        NonAggregatingQueryError,
    )
    add(
        "server-groups-by-sum-column",
        _pair(
            "SELECT activity, region, direction, privacy_time_unit, "
            "SUM(trip_count) AS c1, SUM(trip_distance) AS c2 "
            "FROM DeviceDataStream "
            "GROUP BY activity, region, direction, privacy_time_unit",
            "SELECT c1, privacy_time_unit, SUM(c2) AS s FROM UserResults "
            "GROUP BY c1, privacy_time_unit",
        ),
        NonAggregatingQueryError,
    )
    add(
        "server-groups-by-second-sum-column",
        _pair(
            "SELECT activity, region, direction, privacy_time_unit, "
            "SUM(trip_count) AS c1, SUM(trip_distance) AS c2 "
            "FROM DeviceDataStream "
            "GROUP BY activity, region, direction, privacy_time_unit",
            "SELECT c2, privacy_time_unit, SUM(c1) AS s FROM UserResults "
            "GROUP BY c2, privacy_time_unit",
        ),
        NonAggregatingQueryError,
    )

    # --- non-SUM aggregates ---------------------------------------------
    for func in ("AVG", "COUNT", "MIN", "MAX", "MEDIAN", "STDDEV", "VARIANCE"):
        add(
            f"client-{func.lower()}",
            _pair(
                "SELECT activity, region, direction, privacy_time_unit, "
                f"{func}(trip_count) AS c FROM DeviceDataStream "
                "GROUP BY activity, region, direction, privacy_time_unit",
                _SERVER_OK,
            ),
            UnsupportedAggregateError,
        )
    for func in ("AVG", "COUNT", "MAX", "MODE"):
        add(
            f"server-{func.lower()}",
            _pair(
                _CLIENT_OK,
                "SELECT activity, region, direction, privacy_time_unit, "
                f"{func}(c) AS s FROM UserResults "
                "GROUP BY activity, region, direction, privacy_time_unit",
            ),
            UnsupportedAggregateError,
        )
    add(
        "client-sum-of-grouping-column",
        _pair(
            "SELECT activity, region, direction, privacy_time_unit, "
            "SUM(region) AS c FROM DeviceDataStream "
            "GROUP BY activity, region, direction, privacy_time_unit",
            _SERVER_OK,
        ),
        UnsupportedAggregateError,
    )
    add(
        "client-sum-of-non-numeric-key",
        _pair(
            "SELECT region, direction, privacy_time_unit, "
            "SUM(activity) AS c FROM DeviceDataStream "
            "GROUP BY region, direction, privacy_time_unit",
            "SELECT region, direction, privacy_time_unit, SUM(c) AS s "
            "FROM UserResults GROUP BY region, direction, privacy_time_unit",
        ),
        UnsupportedAggregateError,
    )

    # --- missing privacy_time_unit ---------------------------------------
    client_keys_without_unit = (
        "activity, region, direction",
        "region, direction",
        "activity, region",
        "activity, direction",
        "region",
        "activity",
    )
    for keys in client_keys_without_unit:
        add(
            f"client-missing-unit-[{keys}]",
            _pair(
                f"SELECT {keys}, SUM(trip_count) AS c FROM DeviceDataStream "
                f"GROUP BY {keys}",
                f"SELECT {keys}, SUM(c) AS s FROM UserResults GROUP BY {keys}",
            ),
            MissingPrivacyTimeUnitError,
        )
    server_keys_without_unit = (
        "activity, region, direction",
        "region, direction",
        "activity",
        "region",
        "direction",
        "activity, region",
    )
    for keys in server_keys_without_unit:
        add(
            f"server-missing-unit-[{keys}]",
            _pair(
                _CLIENT_OK,
                f"SELECT {keys}, SUM(c) AS s FROM UserResults GROUP BY {keys}",
            ),
            MissingPrivacyTimeUnitError,
        )

    # --- unknown columns ----------------------------------------------------
    for col in ("device_id", "user_id", "zipcode", "REGION"):
        add(
            f"client-groups-by-{col}",
            _pair(
                f"SELECT {col}, privacy_time_unit, SUM(trip_count) AS c "
                f"FROM DeviceDataStream GROUP BY {col}, privacy_time_unit",
                "SELECT privacy_time_unit, SUM(c) AS s FROM UserResults "
                "GROUP BY privacy_time_unit",
            ),
            UnknownColumnError,
        )
    for col in ("speed", "fare", "TRIP_COUNT"):
        add(
            f"client-sums-{col}",
            _pair(
                "SELECT activity, region, direction, privacy_time_unit, "
                f"SUM({col}) AS c FROM DeviceDataStream "
                "GROUP BY activity, region, direction, privacy_time_unit",
                _SERVER_OK,
            ),
            UnknownColumnError,
        )
    for col in ("device_id", "home_region"):
        add(
            f"server-groups-by-{col}",
            _pair(
                _CLIENT_OK,
                f"SELECT {col}, privacy_time_unit, SUM(c) AS s "
                f"FROM UserResults GROUP BY {col}, privacy_time_unit",
            ),
            UnknownColumnError,
        )
    for col in ("total", "C"):
        add(
            f"server-sums-{col}",
            _pair(
                _CLIENT_OK,
                "SELECT activity, region, direction, privacy_time_unit, "
                f"SUM({col}) AS s FROM UserResults "
                "GROUP BY activity, region, direction, privacy_time_unit",
            ),
            UnknownColumnError,
        )
    add(
        "client-wrong-table",
        _pair(_CLIENT_OK.replace("DeviceDataStream", "TripsTable"), _SERVER_OK),
        UnknownColumnError,
    )
    add(
        "server-wrong-table",
        _pair(_CLIENT_OK, _SERVER_OK.replace("UserResults", "Results")),
        UnknownColumnError,
    )

    assert len(cases) == 50, len(cases)
    return cases
