"""Discrete-time fleet simulation driver.

Advances a simulated clock in fixed ticks over the task horizon.  Each
device wakes once per civil day at a stable (per-device) hour, ingests
its own new trip records, advances its watermarks, draws its condition
flags, and — if the check-in policy allows — checks in, receives
session-bound tokens, and uploads bounded histograms for every complete
window it has not contributed to yet.  The server side (sessions,
checkpoints, releases) runs through :class:`fedsum.server.FederatedServer`.

Condition draws are keyed by (device, day) alone, so fleets under
different check-in policies experience identical conditions and coverage
comparisons are apples-to-apples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

from .aggcore import KEY_SEPARATOR, ClientUpdate
from .client import (
    TIER_PROFILES,
    DeviceState,
    client_work,
    draw_flags,
    histogram_to_rows,
    policy_allows,
)
from .dp import (
    VARIANT_SCALED,
    VARIANT_SPLIT,
    NoisedRelease,
    ResolvedMechanism,
)
from .metrics import (
    default_device_floor,
    exact_workload,
    per_user_mean_error,
    weighted_relative_error,
)
from .model import IndexedHistogram, ScaleTable, Schema, TripRecord
from .server import (
    FederatedServer,
    ServerConfig,
    SessionClosedError,
    SuppressedRelease,
    TaskConfig,
)
from .rng import KeyedRng
from .synth import Corpus
from .windows import TimeWindow

__all__ = ["FleetConfig", "SimulationResult", "build_device_upload", "run_simulation"]


@dataclass(frozen=True)
class FleetConfig:
    """Device-side knobs of a simulation run."""

    policy: str = "idle"
    tick_seconds: int = 3600
    cache_ttl: int = 28 * 86400
    availability: str = "tiered"  # "tiered" or "always_on"

    def __post_init__(self) -> None:
        if self.tick_seconds < 1:
            raise ValueError("tick must be at least one second")
        if self.cache_ttl < 1:
            raise ValueError("cache TTL must be positive")


@dataclass
class SimulationResult:
    server: FederatedServer
    query_id: str
    task_windows: list[TimeWindow]
    releases: dict[str, NoisedRelease | SuppressedRelease]
    downloaded: dict[str, set[int]]
    uploaded: dict[str, set[int]]
    device_tiers: dict[int, str]
    fleet_size: int
    eval_rows: list[dict] = field(default_factory=list)
    reach_rows: list[dict] = field(default_factory=list)


def build_device_upload(
    records: list[TripRecord],
    mechanism: ResolvedMechanism,
    schema: Schema,
) -> IndexedHistogram:
    """One device's bounded upload histogram for one window.

    Scaling happens record-by-record as values accumulate (each value is
    divided by its slice factor on the way in), then the whole histogram
    is clipped — jointly, or per slice for the budget-split variant.
    """
    if mechanism.variant == VARIANT_SPLIT:
        raw = client_work(records, ScaleTable.identity(schema), math.inf, schema)
        return mechanism.transform_device(raw)
    table = (
        mechanism.scale_table
        if mechanism.variant == VARIANT_SCALED
        else ScaleTable.identity(schema)
    )
    assert mechanism.clip is not None
    return client_work(records, table, mechanism.clip, schema)


def _should_wake(now: int, wake_hour: int, last_wake_day: int) -> bool:
    day = now // 86400
    if day <= last_wake_day:
        return False
    return (now % 86400) // 3600 >= wake_hour


def run_simulation(
    corpus: Corpus,
    task: TaskConfig,
    fleet: FleetConfig,
    server_config: ServerConfig | None = None,
    seed: int = 0,
    noise_seed: int | None = None,
    policy_label: str | None = None,
    on_tick: Callable[[int, FederatedServer], None] | None = None,
) -> SimulationResult:
    """Run the full pipeline over the task horizon and evaluate it."""
    schema = corpus.schema
    server = FederatedServer(schema, server_config, seed=seed, noise_seed=noise_seed)
    registered = server.register_task(task, now=corpus.config.start_time)
    windows = registered.windows
    spec = registered.spec
    mechanism = task.mechanism

    fleet_rng = KeyedRng(seed, "fleet")
    devices: dict[int, DeviceState] = {}
    feed_index: dict[int, int] = {}
    wake_hour: dict[int, int] = {}
    last_wake_day: dict[int, int] = {}
    tiers: dict[int, str] = {}
    for dev in corpus.devices:
        profile = (
            TIER_PROFILES["always_on"]
            if fleet.availability == "always_on"
            else TIER_PROFILES[dev.tier]
        )
        state = DeviceState(device_id=dev.device_id, profile=profile)
        state.high_watermark = state.low_watermark = corpus.config.start_time
        state.last_seen_now = corpus.config.start_time
        devices[dev.device_id] = state
        feed_index[dev.device_id] = 0
        wake_hour[dev.device_id] = fleet_rng.randrange(24, "wake-hour", dev.device_id)
        last_wake_day[dev.device_id] = -1
        tiers[dev.device_id] = dev.tier

    downloaded: dict[str, set[int]] = {w.window_id: set() for w in windows}
    uploaded: dict[str, set[int]] = {w.window_id: set() for w in windows}
    corpus_devices = {d.device_id: d for d in corpus.devices}

    start = corpus.config.start_time
    horizon_end = windows[-1].end + task.grace_period + 2 * fleet.tick_seconds
    for now in range(start, horizon_end + 1, fleet.tick_seconds):
        server.maintenance(now)
        if on_tick is not None:
            on_tick(now, server)
        day = now // 86400
        for device_id in sorted(devices):
            state = devices[device_id]
            if not _should_wake(now, wake_hour[device_id], last_wake_day[device_id]):
                continue
            last_wake_day[device_id] = day
            # New records arrive on the device as time passes them.
            source = corpus_devices[device_id].records
            i = feed_index[device_id]
            while i < len(source) and source[i].event_time <= now:
                state.add_record(source[i])
                i += 1
            feed_index[device_id] = i
            state.advance_watermarks(now, task.window_alignment, fleet.cache_ttl)
            flags = draw_flags(fleet_rng, state.profile, device_id, day)
            if not policy_allows(flags, fleet.policy):
                continue
            assignments = server.check_in(device_id, now)
            eligible = {
                w.window_id
                for w in state.eligible_windows(task.query_id, windows)
            }
            for assignment in assignments:
                downloaded[assignment.window_id].add(device_id)
            acked_any = False
            for assignment in assignments:
                if assignment.window_id not in eligible:
                    continue
                window = next(
                    w for w in windows if w.window_id == assignment.window_id
                )
                records = state.visible_records(window)
                if not records:
                    continue
                upload_ok = (
                    fleet_rng.uniform(
                        "upload-ok", device_id, day, assignment.window_id
                    )
                    < state.profile.p_upload_ok
                )
                if not upload_ok:
                    continue
                histogram = build_device_upload(records, mechanism, schema)
                rows = histogram_to_rows(histogram, window.window_id, spec)
                update = ClientUpdate(
                    query_id=task.query_id,
                    window_id=window.window_id,
                    token=assignment.token,
                    rows=tuple(rows),
                )
                try:
                    server.ingest_upload(update, now)
                except SessionClosedError:
                    continue
                state.mark_contributed(task.query_id, window.window_id)
                uploaded[window.window_id].add(device_id)
                acked_any = True
            if acked_any:
                state.finish_exchange()
    server.maintenance(horizon_end + fleet.tick_seconds)

    result = SimulationResult(
        server=server,
        query_id=task.query_id,
        task_windows=windows,
        releases=dict(server.releases),
        downloaded=downloaded,
        uploaded=uploaded,
        device_tiers=tiers,
        fleet_size=len(corpus.devices),
    )
    _evaluate(result, corpus, spec, policy_label or fleet.policy)
    return result


def _evaluate(
    result: SimulationResult,
    corpus: Corpus,
    spec,
    policy_label: str,
) -> None:
    """Fill eval and reach rows from the finished run."""
    schema = corpus.schema
    floor = default_device_floor(corpus.num_devices)
    for window in result.task_windows:
        release = result.releases.get(f"{result.query_id}/{window.window_id}")
        if isinstance(release, NoisedRelease):
            truth = exact_workload(corpus, window)
            counts = corpus.device_counts(window)
            wre = weighted_relative_error(truth, release.histogram, counts, floor)
            truth_rows = dict(histogram_to_rows(truth, window.window_id, spec))
            release_rows = dict(
                histogram_to_rows(release.histogram, window.window_id, spec)
            )
            positions = {c: i for i, c in enumerate(spec.client.group_by)}
            key_counts: dict[str, int] = {}
            for row_key in truth_rows:
                parts = row_key.split(KEY_SEPARATOR)
                a = int(parts[positions["activity"]])
                r = int(parts[positions["region"]])
                d = int(parts[positions["direction"]])
                key_counts[row_key] = counts.get((a, r, d), 0)
            pume = per_user_mean_error(release_rows, truth_rows, key_counts)
            for metric in sorted(wre):
                result.eval_rows.append(
                    {
                        "window_id": window.window_id,
                        "metric": schema.metric_names[metric],
                        "weighted_relative_error": wre[metric],
                        "per_user_mean_error": pume,
                    }
                )
        strata: dict[str, set[int]] = {"all": set(result.device_tiers)}
        for device_id, tier in result.device_tiers.items():
            strata.setdefault(tier, set()).add(device_id)
        for stratum in sorted(strata):
            members = strata[stratum]
            up = len(result.uploaded[window.window_id] & members)
            result.reach_rows.append(
                {
                    "policy": policy_label,
                    "stratum": stratum,
                    "window_id": window.window_id,
                    "h": up / len(members) if members else math.nan,
                }
            )
