"""Vehicle placement, synthetic highway mobility, trace files, and the
joining/leaving event protocol state machines.

The synthetic generator drops ordinary vehicles uniformly along the road at
the configured density and places platoons in the rightmost lane with a
constant intra-platoon gap. Vehicles keep a constant speed and wrap around
the road end, so the road behaves as a ring and density stays constant.
External mobility arrives as a CSV trace (one row per vehicle snapshot) with
linear interpolation between snapshots.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np


class Role(Enum):
    VUE = "vue"
    PVUE = "pvue"


class TrafficMode(Enum):
    PERIODIC_ONLY = "periodic-only"
    JOIN_EVENT = "join-event"
    LEAVE_EVENT = "leave-event"


class TraceFormatError(ValueError):
    """Trace file violates the documented format."""


class GeometryError(ValueError):
    """Requested layout does not fit on the road."""


@dataclass(frozen=True)
class Vehicle:
    id: str
    role: Role
    x_m: float
    lane: int
    speed_mps: float
    platoon: Optional[tuple[int, int]] = None  # (platoon id, index; 0 = leader)

    def __post_init__(self) -> None:
        if self.role is Role.PVUE and self.platoon is None:
            raise ValueError("PVUE must belong to a platoon")


@dataclass(frozen=True)
class Scenario:
    road_length_m: float = 2000.0
    lanes: int = 2
    density_rho: float = 200.0
    n_platoons: int = 1
    platoon_size: int = 5
    intra_gap_m: float = 10.0
    sim_duration_ms: int = 30_000
    traffic: TrafficMode = TrafficMode.PERIODIC_ONLY
    vue_speed_range_mps: tuple[float, float] = (25.0, 35.0)
    platoon_speed_mps: float = 30.0
    lane_width_m: float = 3.5
    ramp_offset_m: float = 30.0

    def __post_init__(self) -> None:
        if self.density_rho < 0:
            raise ValueError("density_rho must be >= 0")
        if self.platoon_size < 2:
            raise ValueError("platoon_size must be >= 2")
        if self.road_length_m <= 0 or self.lanes < 1:
            raise ValueError("road_length_m must be > 0 and lanes >= 1")
        if self.sim_duration_ms < 1:
            raise ValueError("sim_duration_ms must be >= 1")


def generate_highway(rng: np.random.Generator, scenario: Scenario) -> list[Vehicle]:
    """Draw the vehicle population for one replica.

    Ordinary vehicles: round(rho * road_km) of them, x ~ U[0, road], random
    lane, speed ~ U over the configured range. Platoons: evenly spaced along
    the road in lane 0, leader in front, constant gap.
    """
    vehicles: list[Vehicle] = []
    span = (scenario.platoon_size - 1) * scenario.intra_gap_m
    if scenario.n_platoons > 0 and span >= scenario.road_length_m / max(scenario.n_platoons, 1):
        raise GeometryError(
            f"platoon span {span} m does not fit {scenario.n_platoons} platoon(s) "
            f"on a {scenario.road_length_m} m road"
        )
    for p in range(scenario.n_platoons):
        head_x = (p + 0.5) * scenario.road_length_m / scenario.n_platoons
        for i in range(scenario.platoon_size):
            vehicles.append(
                Vehicle(
                    id=f"p{p}v{i}",
                    role=Role.PVUE,
                    x_m=head_x - i * scenario.intra_gap_m,
                    lane=0,
                    speed_mps=scenario.platoon_speed_mps,
                    platoon=(p, i),
                )
            )
    n_vue = int(round(scenario.density_rho * scenario.road_length_m / 1000.0))
    for j in range(n_vue):
        vehicles.append(
            Vehicle(
                id=f"v{j}",
                role=Role.VUE,
                x_m=float(rng.uniform(0.0, scenario.road_length_m)),
                lane=int(rng.integers(0, scenario.lanes)),
                speed_mps=float(rng.uniform(*scenario.vue_speed_range_mps)),
            )
        )
    if scenario.traffic is TrafficMode.JOIN_EVENT:
        # The joining vehicle approaches on a merge ramp: it keeps pace with
        # the first platoon but sits at a lateral offset until admitted.
        head_x = 0.5 * scenario.road_length_m / max(scenario.n_platoons, 1)
        vehicles.append(
            Vehicle(
                id="jv",
                role=Role.VUE,
                x_m=head_x,
                lane=-1,
                speed_mps=scenario.platoon_speed_mps,
            )
        )
    return vehicles


class MobilityTrace:
    """Time-indexed vehicle states with linear interpolation per subframe."""

    def __init__(self, vehicles: list[Vehicle], times_ms: np.ndarray, x_m: np.ndarray):
        if x_m.shape != (len(times_ms), len(vehicles)):
            raise ValueError("x_m must be (snapshots, vehicles)")
        self.vehicles = vehicles
        self.times_ms = times_ms
        self.x_m = x_m

    def positions_at(self, t_ms: float) -> np.ndarray:
        t = float(np.clip(t_ms, self.times_ms[0], self.times_ms[-1]))
        hi = int(np.searchsorted(self.times_ms, t, side="left"))
        if self.times_ms[hi] == t:
            return self.x_m[hi].copy()
        lo = hi - 1
        frac = (t - self.times_ms[lo]) / (self.times_ms[hi] - self.times_ms[lo])
        return self.x_m[lo] + frac * (self.x_m[hi] - self.x_m[lo])


_TRACE_HEADER = ("time_ms", "vehicle_id", "role", "x_m", "lane", "speed_mps")
MAX_SNAPSHOT_SPACING_MS = 100


def export_trace(
    path: str | Path,
    vehicles: list[Vehicle],
    scenario: Scenario,
    duration_ms: int | None = None,
    step_ms: int = 100,
) -> None:
    """Write constant-speed wrapped positions as a trace file."""
    if step_ms < 1 or step_ms > MAX_SNAPSHOT_SPACING_MS:
        raise ValueError(f"step_ms must be in [1, {MAX_SNAPSHOT_SPACING_MS}]")
    duration_ms = scenario.sim_duration_ms if duration_ms is None else duration_ms
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_TRACE_HEADER)
        for t in range(0, duration_ms + 1, step_ms):
            for v in vehicles:
                x = (v.x_m + v.speed_mps * t / 1000.0) % scenario.road_length_m
                writer.writerow([t, v.id, v.role.value, repr(x), v.lane, repr(v.speed_mps)])


def ingest_trace(path: str | Path) -> MobilityTrace:
    """Parse and validate a trace file.

    Requirements: header row, timestamps monotone and shared across vehicles,
    snapshot spacing <= 100 ms, the vehicle set fixed from the first
    snapshot. Errors carry 1-based line numbers.
    """
    path = Path(path)
    rows: list[tuple[int, float, str, str, float, int, float]] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TraceFormatError(f"{path}: empty file")
        if tuple(header) != _TRACE_HEADER:
            raise TraceFormatError(f"{path}: line 1: expected header {','.join(_TRACE_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(_TRACE_HEADER):
                raise TraceFormatError(f"{path}: line {lineno}: expected {len(_TRACE_HEADER)} fields")
            try:
                t = float(row[0])
                role = Role(row[2])
                x = float(row[3])
                lane = int(row[4])
                speed = float(row[5])
            except ValueError as exc:
                raise TraceFormatError(f"{path}: line {lineno}: {exc}") from exc
            rows.append((lineno, t, row[1], role.value, x, lane, speed))
    if not rows:
        raise TraceFormatError(f"{path}: no data rows")

    snapshots: dict[float, dict[str, tuple[int, float, str, int, float]]] = {}
    order: list[float] = []
    last_t_per_vehicle: dict[str, float] = {}
    for lineno, t, vid, role, x, lane, speed in rows:
        if t not in snapshots:
            if order and t < order[-1]:
                raise TraceFormatError(f"{path}: line {lineno}: timestamps not monotone")
            snapshots[t] = {}
            order.append(t)
        if vid in snapshots[t]:
            raise TraceFormatError(f"{path}: line {lineno}: duplicate vehicle {vid} at t={t}")
        if vid in last_t_per_vehicle and t <= last_t_per_vehicle[vid]:
            raise TraceFormatError(f"{path}: line {lineno}: timestamps not monotone for {vid}")
        last_t_per_vehicle[vid] = t
        snapshots[t][vid] = (lineno, x, role, lane, speed)

    first = snapshots[order[0]]
    ids = sorted(first)
    id_set = set(ids)
    for t in order[1:]:
        seen = set(snapshots[t])
        unknown = seen - id_set
        if unknown:
            lineno = snapshots[t][sorted(unknown)[0]][0]
            raise TraceFormatError(f"{path}: line {lineno}: unknown vehicle id mid-trace")
        if seen != id_set:
            raise TraceFormatError(f"{path}: snapshot t={t} missing vehicles {sorted(id_set - seen)}")
    for prev, cur in zip(order, order[1:]):
        if cur - prev > MAX_SNAPSHOT_SPACING_MS:
            raise TraceFormatError(
                f"{path}: snapshot spacing {cur - prev} ms exceeds {MAX_SNAPSHOT_SPACING_MS} ms"
            )

    vehicles = [
        Vehicle(
            id=vid,
            role=Role(first[vid][2]),
            x_m=first[vid][1],
            lane=first[vid][3],
            speed_mps=first[vid][4],
            platoon=None if Role(first[vid][2]) is Role.VUE else _platoon_from_id(vid),
        )
        for vid in ids
    ]
    times = np.array(order)
    x = np.array([[snapshots[t][vid][1] for vid in ids] for t in order])
    return MobilityTrace(vehicles, times, x)


def _platoon_from_id(vid: str) -> tuple[int, int]:
    # Generated platoon ids look like p<platoon>v<index>; anything else gets
    # platoon 0 with a stable index so trace-only PVUEs still form a platoon.
    if vid.startswith("p") and "v" in vid:
        try:
            p, i = vid[1:].split("v", maxsplit=1)
            return (int(p), int(i))
        except ValueError:
            pass
    return (0, 0)


# --- joining / leaving event protocols ------------------------------------


class EventKind(Enum):
    JOINING = "joining"
    LEAVING = "leaving"


@dataclass(frozen=True)
class PhaseSpec:
    name: str
    sender: str
    receiver: str
    critical: bool = True


@dataclass(frozen=True)
class EventMessage:
    sender: str
    receiver: str
    name: str
    phase_index: int
    attempt: int

    def key(self) -> tuple[str, str, str]:
        return (self.sender, self.receiver, self.name)


def joining_phases(jv: str, hv: str, fv_jv: str) -> tuple[PhaseSpec, ...]:
    """Joining critical path; the alert and stretching request travel as one
    bundled transmission to the vehicle that will follow the joiner."""
    return (
        PhaseSpec("joining_request", jv, hv),
        PhaseSpec("joining_alert_stretch", hv, fv_jv),
        PhaseSpec("joining_permission", hv, jv),
        PhaseSpec("joining_confirmation", jv, hv),
    )


def leaving_phases(lv: str, hv: str, fv_lv: str) -> tuple[PhaseSpec, ...]:
    """Leaving critical path is request/permission/confirmation; the final
    alert to the follower is off the measured path."""
    return (
        PhaseSpec("leaving_request", lv, hv),
        PhaseSpec("leaving_permission", hv, lv),
        PhaseSpec("leaving_confirmation", lv, hv),
        PhaseSpec("leaving_alert", hv, fv_lv, critical=False),
    )


RETRY_TIMEOUT_MS = 20


@dataclass
class EventFsm:
    """Sequential message protocol with per-phase retransmission.

    A phase advances only when its message is delivered; an undelivered
    message is re-enqueued once the retry timer (one reservation interval)
    expires. ``attempts`` counts critical-path transmissions; ``end_ms`` is
    set when the last critical phase completes.
    """

    kind: EventKind
    phases: tuple[PhaseSpec, ...]
    start_ms: int
    retry_timeout_ms: int = RETRY_TIMEOUT_MS
    phase_index: int = 0
    attempts: int = 0
    end_ms: Optional[int] = None
    deadline_ms: Optional[int] = None

    @property
    def done(self) -> bool:
        return self.phase_index >= len(self.phases)

    @property
    def completed(self) -> bool:
        return self.end_ms is not None

    def _enqueue_current(self, now_ms: int) -> EventMessage:
        phase = self.phases[self.phase_index]
        if phase.critical:
            self.attempts += 1
        self.deadline_ms = now_ms + self.retry_timeout_ms
        return EventMessage(phase.sender, phase.receiver, phase.name, self.phase_index, self.attempts)


def start_event_fsm(fsm: EventFsm, now_ms: int) -> list[EventMessage]:
    """Kick off the protocol by enqueueing the first phase's message."""
    if fsm.done or fsm.deadline_ms is not None:
        raise ValueError("event already started or finished")
    return [fsm._enqueue_current(now_ms)]


def step_event_fsm(
    fsm: EventFsm, delivered: set[tuple[str, str, str]], now_ms: int
) -> tuple[EventFsm, list[EventMessage]]:
    """Advance the protocol given this subframe's delivered messages.

    Returns the (mutated) fsm and any messages to enqueue: the next phase on
    delivery, or a retransmission of the current one on timeout.
    """
    if fsm.done:
        return fsm, []
    to_send: list[EventMessage] = []
    phase = fsm.phases[fsm.phase_index]
    if (phase.sender, phase.receiver, phase.name) in delivered:
        fsm.phase_index += 1
        if phase.critical and (
            fsm.phase_index >= len(fsm.phases) or not fsm.phases[fsm.phase_index].critical
        ):
            fsm.end_ms = now_ms
        if not fsm.done:
            to_send.append(fsm._enqueue_current(now_ms))
        else:
            fsm.deadline_ms = None
    elif fsm.deadline_ms is not None and now_ms >= fsm.deadline_ms:
        to_send.append(fsm._enqueue_current(now_ms))
    return fsm, to_send
