"""Per-subframe simulation loop and metric aggregation.

One replica is a sequential event loop over 1 ms subframes. Each subframe:
vehicles due to transmit first pick the resource for their *next* packet (so
the reservation can ride in this packet's control word), then all
transmissions are resolved together: per-receiver channel gains are drawn,
co-cell interference summed, unicast outcomes classified (half-duplex
collision, SINR error, or reception), control-word and transport-block
decodability evaluated for every listener, and the sensing rings of all
non-transmitting vehicles updated.

Outcomes partition every unicast transmission: the target transmitting in
the same subframe is a collision regardless of subchannel; otherwise the
SINR test against the decoding threshold decides reception versus error.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np

from .channel import FastFading, PowerLaw, db_to_linear, linear_to_db, noise_power_dbm
from .config import RunConfig
from .estimator import EstimatorNet, denormalize_rssi, forward_batch, load_weights, normalize_features
from .grid import ResourceIndex, SelectionSubset, assert_single_allocation, selection_window
from .scenario import (
    EventFsm,
    EventKind,
    EventMessage,
    MobilityTrace,
    Role,
    TrafficMode,
    generate_highway,
    ingest_trace,
    joining_phases,
    leaving_phases,
    start_event_fsm,
    step_event_fsm,
)
from .schedulers import (
    ProactiveView,
    SchedulerKind,
    SpsState,
    ext_sci_avoid_select,
    min_rssi_select,
    pr_cara_select,
    rc_range_for,
    sb_ds_select,
    sb_sps_select,
)
from .sci import RI2_MAX, ExtendedSci, encode_sci
from .sensing import (
    SENSING_WINDOW_APERIODIC_MS,
    SENSING_WINDOW_PERIODIC_MS,
    CsrConstructionError,
    build_csr,
    phase_fold,
)

log = logging.getLogger(__name__)

# Observations older than this cannot announce into a future window
# (RI2 <= 127 ms plus one reservation interval) and are dropped from
# hidden/exposed assembly.
OBSERVATION_HORIZON_MS = 250


class InvariantError(AssertionError):
    """An engine invariant was violated; indicates a scheduler or engine bug."""


class MetricsUndefinedError(RuntimeError):
    """Metrics requested over zero transmissions."""


class Outcome(Enum):
    RECEPTION = "reception"
    ERROR = "error"
    COLLISION = "collision"


@dataclass(frozen=True)
class TxRecord:
    sender: str
    stream: str  # "pam" or "event"
    l: int
    cell: ResourceIndex
    target: str
    outcome: Outcome
    sinr_db: float


@dataclass
class RunMetrics:
    pdr: float
    per: float
    pcr: float
    ipg_mean_ms: float
    ipg_p90_ms: float
    event_processing_ms: float
    event_attempts: float
    n_tx: int
    n_links_starved: int = 0
    n_events_completed: int = 0

    FIELDS = (
        "pdr",
        "per",
        "pcr",
        "ipg_mean_ms",
        "ipg_p90_ms",
        "event_processing_ms",
        "event_attempts",
    )


@dataclass
class ReplicaResult:
    rho: float
    scheduler: SchedulerKind
    seed: int
    metrics: RunMetrics
    counters: dict[str, int]
    records: Optional[list[TxRecord]] = None


def compute_reliability(records: list[TxRecord]) -> tuple[float, float, float]:
    """(delivery, error, collision) ratios over unicast transmissions."""
    unicast = [r for r in records if r.target != "broadcast"]
    if not unicast:
        raise MetricsUndefinedError("no unicast transmissions")
    n = len(unicast)
    received = sum(1 for r in unicast if r.outcome is Outcome.RECEPTION)
    collided = sum(1 for r in unicast if r.outcome is Outcome.COLLISION)
    errored = n - received - collided
    return received / n, errored / n, collided / n


def compute_ipg(link_records: list[TxRecord], rri_ms: int) -> tuple[float, list[int], float]:
    """Gaps between consecutive successful receptions on one link.

    For each received packet the gap runs to the next received packet in
    transmission order; the trailing reception contributes none. Returns
    (mean, sorted gap list, 90th percentile of the empirical distribution).
    Requires at least two receptions.
    """
    ordered = sorted(link_records, key=lambda r: r.l)
    times = [r.cell.t for r in ordered if r.outcome is Outcome.RECEPTION]
    if len(times) < 2:
        raise MetricsUndefinedError("fewer than two receptions on link")
    gaps = sorted(b - a for a, b in zip(times, times[1:]))
    mean = sum(gaps) / len(gaps)
    p90 = gaps[math.ceil(0.9 * len(gaps)) - 1]
    return mean, gaps, float(p90)


# --- internal bookkeeping ----------------------------------------------------


@dataclass
class _Stream:
    """One periodic traffic source (broadcast awareness or platoon unicast)."""

    sender: int
    kind: str  # "cam", "pam", "event"
    rri_ms: int
    target: int  # -1 for broadcast
    l: int = 0  # packets scheduled so far
    sps: Optional[SpsState] = None


@dataclass
class _Transmission:
    sender: int
    cell: ResourceIndex
    kind: str
    l: int
    target: int
    sci_word: int = 0
    announced: Optional[ResourceIndex] = None
    message: Optional[EventMessage] = None


@dataclass
class _Announcement:
    cell: ResourceIndex
    sender: int
    decoded: np.ndarray  # per-vehicle SCI decode mask
    rx_power_mw: np.ndarray  # per-vehicle received power of the announcing packet


@dataclass
class _Observation:
    c: int
    sender: int
    decoded: np.ndarray
    announced: Optional[ResourceIndex]


class SimWorld:
    """State and loop for one replica."""

    def __init__(
        self,
        config: RunConfig,
        rho: float,
        scheduler: SchedulerKind,
        seed: int,
        trace_selections: bool = False,
    ):
        self.config = config
        self.scheduler = scheduler
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.scenario = replace(config.scenario, density_rho=rho)
        self.rho = rho
        # Optional per-selection trace: (vehicle, l, c, t, scheduler, fallback).
        self.selection_trace: Optional[list[tuple]] = [] if trace_selections else None

        if config.trace_path:
            self.trace: Optional[MobilityTrace] = ingest_trace(config.trace_path)
            vehicles = self.trace.vehicles
        else:
            self.trace = None
            vehicles = generate_highway(self.rng, self.scenario)
        self.vehicles = vehicles
        self.n = len(vehicles)
        self.ids = [v.id for v in vehicles]
        self.index_of = {v.id: i for i, v in enumerate(vehicles)}
        self.x0 = np.array([v.x_m for v in vehicles])
        self.speed = np.array([v.speed_mps for v in vehicles])
        lane = np.array([v.lane for v in vehicles])
        self.lateral = np.where(
            lane >= 0, lane * self.scenario.lane_width_m, -self.scenario.ramp_offset_m
        )
        self.road_length = self.scenario.road_length_m
        self.positions = self.x0.copy()

        # Radio constants.
        self.C = config.grid.num_subchannels
        self.noise_floor_dbm = noise_power_dbm(config.budget)
        self.noise_mw = db_to_linear(self.noise_floor_dbm)
        self.eirp_mw = db_to_linear(config.budget.eirp_dbm())
        pathloss = config.channel.pathloss
        if isinstance(pathloss, PowerLaw):
            self._gain_scale = self.eirp_mw * pathloss.constant
            self._gain_exponent = -pathloss.exponent
        else:
            offset_db = 41.0 + 20.0 * math.log10(pathloss.carrier_ghz / 5.0)
            self._gain_scale = self.eirp_mw * 10.0 ** (-offset_db / 10.0)
            self._gain_exponent = -2.27
        self._shadow_sigma_ln = config.channel.shadowing_sigma_db * math.log(10.0) / 10.0
        th = config.thresholds
        self.gamma_sci_lin = db_to_linear(th.gamma_sci_db)
        self.gamma0_lin = {
            kind: db_to_linear(th.gamma0_for(kind)) for kind in ("cam", "pam", "event")
        }

        # Sensing ring shared across vehicles: slot-major so the per-subframe
        # write is contiguous; per-vehicle folds slice a strided view.
        self.window_capacity = SENSING_WINDOW_PERIODIC_MS
        self.ring_mw = np.full((self.window_capacity, self.n, self.C), np.nan)
        self.ring_row_t = np.zeros(self.window_capacity, dtype=int)

        # Platoon structure: each member unicasts to its follower (the tail
        # reports to the vehicle ahead), and monitors the control words of
        # its immediate neighbors.
        self.platoons: dict[int, list[int]] = defaultdict(list)
        for i, v in enumerate(vehicles):
            if v.platoon is not None:
                self.platoons[v.platoon[0]].append(i)
        for members in self.platoons.values():
            members.sort(key=lambda i: vehicles[i].platoon[1])
        self.primary_senders: dict[int, set[int]] = {}
        self.pam_target: dict[int, int] = {}
        for members in self.platoons.values():
            for pos, i in enumerate(members):
                ahead = members[pos - 1] if pos > 0 else None
                rear = members[pos + 1] if pos < len(members) - 1 else None
                self.pam_target[i] = rear if rear is not None else ahead
                self.primary_senders[i] = {v for v in (ahead, rear) if v is not None}

        # Traffic streams.
        self.streams: list[_Stream] = []
        tr = config.traffic
        events_on = self.scenario.traffic in (TrafficMode.JOIN_EVENT, TrafficMode.LEAVE_EVENT)
        pam_enabled = tr.periodic_during_events or not events_on
        for i, v in enumerate(vehicles):
            if v.role is Role.PVUE and pam_enabled:
                self.streams.append(
                    _Stream(sender=i, kind="pam", rri_ms=tr.pam_rri_ms, target=self.pam_target[i])
                )
            elif v.role is Role.VUE:
                self.streams.append(_Stream(sender=i, kind="cam", rri_ms=tr.cam_rri_ms, target=-1))
        self.stream_of = {(s.sender, s.kind): s for s in self.streams}

        # Event protocol wiring.
        self.active_fsm: Optional[EventFsm] = None
        self.completed_fsms: list[EventFsm] = []
        self.event_trigger_times: list[int] = []
        if events_on:
            t = tr.event_start_ms
            while t < self.scenario.sim_duration_ms - 100:
                self.event_trigger_times.append(t)
                t += tr.event_interval_ms
        self.event_participants = self._event_participants() if events_on else None

        # Per-subframe bookkeeping.
        self.calendar: dict[int, list[_Transmission]] = defaultdict(list)
        self.busy: dict[int, set[int]] = defaultdict(set)  # vehicle -> scheduled subframes
        self.own_tx: dict[int, list[int]] = defaultdict(list)  # past tx subframes
        # Periodic windows are aligned across vehicles, so their cell sets
        # and fold indices are shared and cached per (start, rri).
        self._window_cache: dict[tuple[int, int], tuple] = {}
        self.announcements: dict[int, list[_Announcement]] = defaultdict(list)
        self.observations: dict[int, list[_Observation]] = defaultdict(list)
        tracked = sorted(set(self.pam_target) | self._event_vehicle_set())
        self.tracked_index = {v: k for k, v in enumerate(tracked)}
        self.known_x = np.zeros((len(tracked), self.n))
        self.known_lat = np.zeros((len(tracked), self.n))
        self.known = np.zeros((len(tracked), self.n), dtype=bool)

        self.estimator: Optional[EstimatorNet] = None
        if scheduler in (SchedulerKind.MIN_RSSI, SchedulerKind.PR_CARA):
            if not config.estimator_weights:
                raise ValueError(f"{scheduler.value} requires estimator weights")
            self.estimator = load_weights(config.estimator_weights)

        self.records: list[TxRecord] = []
        self.counters: dict[str, int] = defaultdict(int)

    # -- setup helpers ------------------------------------------------------

    def _event_participants(self) -> dict[str, int]:
        tr = self.config.traffic
        if not self.platoons:
            raise ValueError("event scenarios require at least one platoon")
        members = self.platoons[min(self.platoons)]
        hv = members[0]
        if self.scenario.traffic is TrafficMode.LEAVE_EVENT:
            idx = min(max(tr.leave_index, 1), len(members) - 2)
            return {"hv": hv, "lv": members[idx], "fv": members[idx + 1]}
        jv = self.index_of.get("jv")
        if jv is None:
            raise ValueError("join scenario requires the ramp vehicle")
        idx = min(max(tr.join_index, 1), len(members) - 1)
        return {"hv": hv, "jv": jv, "fv": members[idx]}

    def _event_vehicle_set(self) -> set[int]:
        if self.scenario.traffic is TrafficMode.PERIODIC_ONLY:
            return set()
        return set(self._event_participants().values())

    def _make_fsm(self, now: int) -> EventFsm:
        p = self.event_participants
        assert p is not None
        if self.scenario.traffic is TrafficMode.LEAVE_EVENT:
            phases = leaving_phases(self.ids[p["lv"]], self.ids[p["hv"]], self.ids[p["fv"]])
            return EventFsm(kind=EventKind.LEAVING, phases=phases, start_ms=now)
        phases = joining_phases(self.ids[p["jv"]], self.ids[p["hv"]], self.ids[p["fv"]])
        return EventFsm(kind=EventKind.JOINING, phases=phases, start_ms=now)

    # -- main loop ----------------------------------------------------------

    def run(self) -> ReplicaResult:
        duration = self.scenario.sim_duration_ms
        for stream in sorted(self.streams, key=lambda s: s.sender):
            self._schedule(stream, self._select_resource(stream, now=0))
        for t in range(1, duration + 1):
            if self.trace is not None:
                self.positions = self.trace.positions_at(t) % self.road_length
            else:
                self.positions = (self.x0 + self.speed * (t / 1000.0)) % self.road_length
            self._check_event_triggers(t)
            txs = self.calendar.pop(t, None)
            delivered: set[tuple[str, str, str]] = set()
            if txs:
                delivered = self._process_subframe(t, txs)
            self._step_fsm(t, delivered)
            if t % 128 == 0:
                self._prune(t)
        metrics = self._build_metrics()
        return ReplicaResult(
            rho=self.rho,
            scheduler=self.scheduler,
            seed=self.seed,
            metrics=metrics,
            counters=dict(self.counters),
            records=self.records,
        )

    def _schedule(self, stream: _Stream, cell: ResourceIndex) -> None:
        stream.l += 1
        self.calendar[cell.t].append(
            _Transmission(
                sender=stream.sender,
                cell=cell,
                kind=stream.kind,
                l=stream.l,
                target=stream.target,
            )
        )
        self.busy[stream.sender].add(cell.t)

    def _check_event_triggers(self, t: int) -> None:
        if self.active_fsm is not None and self.active_fsm.done:
            self.completed_fsms.append(self.active_fsm)
            self.active_fsm = None
        if not self.event_trigger_times or t != self.event_trigger_times[0]:
            return
        self.event_trigger_times.pop(0)
        if self.active_fsm is not None:
            self.counters["events_skipped"] += 1
            return
        self.active_fsm = self._make_fsm(t)
        for msg in start_event_fsm(self.active_fsm, t):
            self._schedule_event_message(msg, t)

    def _step_fsm(self, t: int, delivered: set[tuple[str, str, str]]) -> None:
        if self.active_fsm is None:
            return
        _, to_send = step_event_fsm(self.active_fsm, delivered, t)
        for msg in to_send:
            self._schedule_event_message(msg, t)
        if self.active_fsm.done:
            self.completed_fsms.append(self.active_fsm)
            self.active_fsm = None

    def _schedule_event_message(self, msg: EventMessage, now: int) -> None:
        sender = self.index_of[msg.sender]
        stream = _Stream(
            sender=sender,
            kind="event",
            rri_ms=self.config.traffic.pam_rri_ms,
            target=self.index_of[msg.receiver],
        )
        cell = self._select_resource(stream, now=now)
        if cell.t > self.scenario.sim_duration_ms:
            return
        self.calendar[cell.t].append(
            _Transmission(
                sender=sender,
                cell=cell,
                kind="event",
                l=msg.attempt,
                target=stream.target,
                message=msg,
            )
        )
        self.busy[sender].add(cell.t)

    def _prune(self, t: int) -> None:
        for key in [k for k in self.announcements if k < t]:
            del self.announcements[key]
        horizon = t - OBSERVATION_HORIZON_MS
        for key in [k for k in self.observations if k < horizon]:
            del self.observations[key]
        for key in [k for k in self._window_cache if k[0] + k[1] < t]:
            del self._window_cache[key]
        for sender, slots in self.busy.items():
            if slots:
                self.busy[sender] = {s for s in slots if s >= t}
        floor = t - self.window_capacity - 128
        for sender, times in self.own_tx.items():
            if times and times[0] < floor:
                self.own_tx[sender] = [s for s in times if s >= floor]

    # -- radio --------------------------------------------------------------

    def _process_subframe(self, t: int, txs: list[_Transmission]) -> set[tuple[str, str, str]]:
        txs.sort(key=lambda tx: (tx.sender, tx.kind))
        # Select next resources first so the reservations ride in this
        # subframe's control words.
        for tx in txs:
            if tx.kind in ("cam", "pam"):
                self._schedule_followup(tx)
            tx.sci_word = self._make_sci(tx, t)

        senders = np.array([tx.sender for tx in txs])
        k = len(txs)
        dx = np.abs(self.positions[None, :] - self.positions[senders, None])
        dx = np.minimum(dx, self.road_length - dx)
        dlat = self.lateral[None, :] - self.lateral[senders, None]
        # Antenna separation floor: unconstrained placement may overlap
        # vehicles, and the pathloss models blow up below ~1 m.
        dist = np.maximum(np.hypot(dx, dlat), 1.0)

        channel = self.config.channel
        # Both models reduce to gain = g0 * d^-kappa, which needs a single
        # transcendental per link.
        power = self._gain_scale * dist ** self._gain_exponent
        if channel.shadowing_sigma_db > 0:
            power = power * self.rng.lognormal(0.0, self._shadow_sigma_ln, size=(k, self.n))
        if channel.fast_fading is FastFading.RAYLEIGH_UNIT_MEAN:
            power = power * self.rng.exponential(1.0, size=(k, self.n))

        # Co-cell sums and per-transmission SINR at every vehicle.
        transmitting = np.zeros(self.n, dtype=bool)
        transmitting[senders] = True
        rssi = np.full((self.n, self.C), self.noise_mw)
        sinr = np.empty((k, self.n))
        by_channel: dict[int, list[int]] = defaultdict(list)
        for j, tx in enumerate(txs):
            by_channel[tx.cell.c].append(j)
        for c, rows in by_channel.items():
            total = power[rows].sum(axis=0)
            rssi[:, c] += total
            for j in rows:
                sinr[j] = power[j] / (self.noise_mw + total - power[j])

        sci_mask = sinr >= self.gamma_sci_lin
        sci_mask[:, transmitting] = False
        delivered: set[tuple[str, str, str]] = set()
        for j, tx in enumerate(txs):
            tb_ok = sinr[j] >= self.gamma0_lin[tx.kind]
            tb_ok[transmitting] = False
            self._register_decodes(tx, t, sci_mask[j], tb_ok, power[j])
            if tx.target >= 0:
                self._record_outcome(tx, sinr[j], transmitting, delivered)

        # Sensing update: every non-transmitting vehicle hears the subframe.
        row = t % self.window_capacity
        self.ring_mw[row] = rssi
        self.ring_mw[row, senders, :] = np.nan
        self.ring_row_t[row] = t
        for j in senders:
            self.own_tx[int(j)].append(t)
        return delivered

    def _record_outcome(
        self,
        tx: _Transmission,
        sinr_row: np.ndarray,
        transmitting: np.ndarray,
        delivered: set,
    ) -> None:
        target = tx.target
        if transmitting[target]:
            outcome, sinr_db = Outcome.COLLISION, float("nan")
        else:
            value = float(sinr_row[target])
            outcome = Outcome.RECEPTION if value >= self.gamma0_lin[tx.kind] else Outcome.ERROR
            sinr_db = float(linear_to_db(value))
        stream = "event" if tx.kind == "event" else "pam"
        self.records.append(
            TxRecord(
                sender=self.ids[tx.sender],
                stream=stream,
                l=tx.l,
                cell=tx.cell,
                target=self.ids[target],
                outcome=outcome,
                sinr_db=sinr_db,
            )
        )
        if outcome is Outcome.RECEPTION and tx.message is not None:
            delivered.add(tx.message.key())

    def _register_decodes(
        self,
        tx: _Transmission,
        t: int,
        sci_ok: np.ndarray,
        tb_ok: np.ndarray,
        rx_power_mw: np.ndarray,
    ) -> None:
        if tx.announced is not None:
            self.announcements[tx.announced.t].append(
                _Announcement(
                    cell=tx.announced, sender=tx.sender, decoded=sci_ok, rx_power_mw=rx_power_mw
                )
            )
        self.observations[t].append(
            _Observation(c=tx.cell.c, sender=tx.sender, decoded=sci_ok, announced=tx.announced)
        )
        # Positions travel in the transport block; track them for the
        # listeners that assemble hidden/exposed features.
        for vid, row in self.tracked_index.items():
            if tb_ok[vid]:
                self.known_x[row, tx.sender] = self.positions[tx.sender]
                self.known_lat[row, tx.sender] = self.lateral[tx.sender]
                self.known[row, tx.sender] = True

    def _make_sci(self, tx: _Transmission, t: int) -> int:
        sci = ExtendedSci(mcs=self.config.traffic.mcs)
        if tx.announced is not None:
            offset = tx.announced.t - t
            if 1 <= offset <= RI2_MAX:
                sci = replace(sci, ri1=tx.announced.c, ri2=offset)
            else:
                # The next reservation does not fit the 7-bit offset field.
                self.counters["announce_suppressed"] += 1
                tx.announced = None
        return encode_sci(sci)

    def _schedule_followup(self, tx: _Transmission) -> None:
        stream = self.stream_of[(tx.sender, tx.kind)]
        window_start = stream.l * stream.rri_ms
        if window_start + 1 > self.scenario.sim_duration_ms:
            return
        cell = self._select_resource(stream, now=tx.cell.t)
        # Announcing an arbitrary next resource is the extended-SCI system;
        # the legacy control word can only flag a periodic reuse of the
        # current cell, so a legacy reselection stays invisible until used.
        kind = self.config.vue_scheduler if stream.kind == "cam" else self.scheduler
        extended = kind in (
            SchedulerKind.EXT_SCI_AVOID,
            SchedulerKind.MIN_RSSI,
            SchedulerKind.PR_CARA,
        )
        if extended or cell == tx.cell.shifted(stream.rri_ms):
            tx.announced = cell
        self._schedule(stream, cell)

    # -- resource selection ---------------------------------------------------

    def _select_resource(self, stream: _Stream, now: int) -> ResourceIndex:
        window_start = now if stream.kind == "event" else stream.l * stream.rri_ms
        kind = self.config.vue_scheduler if stream.kind == "cam" else self.scheduler
        is_sps = kind is SchedulerKind.SB_SPS and stream.kind != "event"
        busy = self.busy[stream.sender]

        if is_sps:
            if stream.sps is None:
                stream.sps = SpsState(rri_ms=stream.rri_ms, rc_range=rc_range_for(stream.rri_ms))
            if stream.sps.rc > 0:
                held = stream.sps.current_resource.shifted(stream.rri_ms)
                if window_start < held.t <= window_start + stream.rri_ms and held.t not in busy:
                    cell, stream.sps = sb_sps_select(stream.sps, None, self.rng)
                    self._trace_selection(stream, cell, kind, False)
                    return cell
                # Held resource became unusable; force a reselection.
                stream.sps = SpsState(rri_ms=stream.rri_ms, rc_range=stream.sps.rc_range)

        subset = self._window_subset(stream, window_start)
        busy_in_window = {s for s in busy if window_start < s <= window_start + stream.rri_ms}
        if busy_in_window:
            free = frozenset(c for c in subset.cells if c.t not in busy_in_window)
            if free:
                subset = SelectionSubset(
                    subset.owner, subset.transmission_index, subset.rri_ms, free
                )
        before = (
            self.counters["csr_failures"] + self.counters["fallbacks"] + self.counters["cold_starts"]
        )
        cell = self._fresh_selection(kind, stream, subset, now, is_sps)
        if not assert_single_allocation({cell}, subset):
            raise InvariantError(f"scheduler returned out-of-window cell {cell}")
        after = (
            self.counters["csr_failures"] + self.counters["fallbacks"] + self.counters["cold_starts"]
        )
        self._trace_selection(stream, cell, kind, after > before)
        return cell

    def _trace_selection(
        self, stream: _Stream, cell: ResourceIndex, kind: SchedulerKind, fell_back: bool
    ) -> None:
        if self.selection_trace is not None:
            self.selection_trace.append(
                (self.ids[stream.sender], stream.l + 1, cell.c, cell.t, kind.value, fell_back)
            )

    def _window_subset(self, stream: _Stream, window_start: int) -> SelectionSubset:
        key = (window_start, stream.rri_ms)
        entry = self._window_cache.get(key)
        if entry is None:
            probe = selection_window("_", window_start, stream.rri_ms, self.C)
            ordered = probe.ordered()
            rows = np.array([cell.t % stream.rri_ms for cell in ordered])
            cols = np.array([cell.c for cell in ordered])
            entry = (probe.cells, ordered, rows, cols)
            self._window_cache[key] = entry
        cells, ordered, rows, cols = entry
        subset = SelectionSubset(self.ids[stream.sender], stream.l + 1, stream.rri_ms, cells)
        object.__setattr__(subset, "_ordered", ordered)
        object.__setattr__(subset, "_fold_idx", (rows, cols))
        return subset

    def _fresh_selection(
        self,
        kind: SchedulerKind,
        stream: _Stream,
        subset: SelectionSubset,
        now: int,
        is_sps: bool,
    ) -> ResourceIndex:
        window_ms = (
            SENSING_WINDOW_APERIODIC_MS if stream.kind == "event" else SENSING_WINDOW_PERIODIC_MS
        )
        means_mw, counts = phase_fold(
            self.ring_mw[:, stream.sender, :], self.ring_row_t, now, window_ms, stream.rri_ms
        )
        # Half-duplex candidate exclusion, a weak form of the standard rule:
        # a phase is not selectable when the vehicle's own transmissions left
        # it with no samples at all (it cannot be claimed quiet), or when the
        # vehicle used it within the last interval, including the phase it is
        # moving off (the average there is at least one period stale, which
        # hides anyone who settled on the subframe since). Phases with fresh
        # monitored periods stay in.
        excluded: set[int] = set()
        own = self.own_tx.get(stream.sender)
        if own:
            lo = now - window_ms
            fresh = now - stream.rri_ms
            for s in own:
                if lo < s <= now:
                    phase = s % stream.rri_ms
                    if s >= fresh or counts[phase, 0] == 0:
                        excluded.add(phase)
            excluded.add(own[-1] % stream.rri_ms)
        if not counts.any():
            # Nothing sensed yet (stream start-up): uniform in-window pick.
            self.counters["cold_starts"] += 1
            cell = self._uniform_cell(subset)
            if is_sps:
                lo, hi = rc_range_for(stream.rri_ms)
                stream.sps = SpsState(
                    rri_ms=stream.rri_ms,
                    current_resource=cell,
                    rc=int(self.rng.integers(lo, hi + 1)),
                    rc_range=(lo, hi),
                )
            return cell

        averages = self._averages_dbm(means_mw, subset)
        if excluded:
            for cell in subset.ordered():
                if cell.t % stream.rri_ms in excluded:
                    averages[cell] = math.inf
        if kind in (SchedulerKind.MIN_RSSI, SchedulerKind.PR_CARA):
            view = self._assemble_view(stream.sender, subset, averages, now)
            if kind is SchedulerKind.MIN_RSSI:
                return min_rssi_select(view, subset)
            reserved = self._reserved_subframes(stream, subset)
            return pr_cara_select(view, subset, reserved, self.rng, stats=self.counters)

        # A decoded reservation previews the reserver's power on that cell;
        # merging it into the average lets the threshold loop exclude close
        # reservers while ignoring distant ones (a hard exclusion flag would
        # empty the candidate set at any realistic density).
        for cell, power_dbm in self._reservation_power_dbm(stream.sender, subset).items():
            if power_dbm > averages.get(cell, math.inf):
                averages[cell] = power_dbm
        try:
            csr = build_csr(averages, frozenset(), subset)
        except CsrConstructionError:
            self.counters["csr_failures"] += 1
            log.debug("CSR construction failed for %s; random in-window pick", subset.owner)
            return self._uniform_cell(subset)
        if is_sps:
            cell, stream.sps = sb_sps_select(stream.sps, csr, self.rng)
            return cell
        if kind is SchedulerKind.EXT_SCI_AVOID:
            reserved = self._reserved_subframes(stream, subset)
            return ext_sci_avoid_select(csr, reserved, self.rng)
        # SB-DS, and one-shot event messages under SB-SPS.
        return sb_ds_select(csr, self.rng)

    def _uniform_cell(self, subset: SelectionSubset) -> ResourceIndex:
        cells = subset.ordered()
        return cells[int(self.rng.integers(len(cells)))]

    def _averages_dbm(
        self, means_mw: np.ndarray, subset: SelectionSubset
    ) -> dict[ResourceIndex, float]:
        ordered = subset.ordered()
        fold_idx = getattr(subset, "_fold_idx", None)
        if fold_idx is None:
            rows = np.array([cell.t % subset.rri_ms for cell in ordered])
            cols = np.array([cell.c for cell in ordered])
        else:
            rows, cols = fold_idx
        values = means_mw[rows, cols]
        with np.errstate(invalid="ignore", divide="ignore"):
            dbm = np.where(np.isnan(values), self.noise_floor_dbm, 10.0 * np.log10(values))
        return dict(zip(ordered, dbm.tolist()))

    def _reservation_power_dbm(
        self, listener: int, subset: SelectionSubset
    ) -> dict[ResourceIndex, float]:
        """Strongest decoded reservation per window cell, in dBm."""
        power: dict[ResourceIndex, float] = {}
        for t_res in subset.subframes():
            for ann in self.announcements.get(t_res, ()):
                if ann.sender != listener and ann.decoded[listener]:
                    p = float(ann.rx_power_mw[listener])
                    if p > power.get(ann.cell, 0.0):
                        power[ann.cell] = p
        return {cell: float(linear_to_db(p)) for cell, p in power.items()}

    def _reserved_subframes(self, stream: _Stream, subset: SelectionSubset) -> set[int]:
        if stream.kind == "event":
            primary = {stream.target}
        else:
            primary = self.primary_senders.get(stream.sender, set())
        reserved = set()
        for t_res in subset.subframes():
            for ann in self.announcements.get(t_res, ()):
                if ann.sender in primary and ann.decoded[stream.sender]:
                    reserved.add(t_res)
        return reserved

    def _assemble_view(
        self,
        listener: int,
        subset: SelectionSubset,
        averages: dict[ResourceIndex, float],
        now: int,
    ) -> ProactiveView:
        rri = subset.rri_ms
        row = self.tracked_index[listener]
        # Who did this listener hear recently, per (subchannel, phase)?
        seen: dict[tuple[int, int], list[_Observation]] = defaultdict(list)
        for tt in range(max(1, now - OBSERVATION_HORIZON_MS), now + 1):
            for obs in self.observations.get(tt, ()):
                if obs.sender != listener and obs.decoded[listener]:
                    seen[(obs.c, tt % rri)].append(obs)
        # Which cells of the window carry decoded reservations?
        reservations: dict[ResourceIndex, list[int]] = defaultdict(list)
        for t_res in subset.subframes():
            for ann in self.announcements.get(t_res, ()):
                if ann.sender != listener and ann.decoded[listener]:
                    reservations[ann.cell].append(ann.sender)

        eps_p: dict[ResourceIndex, float] = {}
        inputs: dict[ResourceIndex, tuple[int, float, int, float]] = {}
        pending: list[ResourceIndex] = []
        features: list[tuple[float, int, float, int, float]] = []
        for cell in subset.ordered():
            if averages[cell] == math.inf:
                # Half-duplex-excluded phase; never a candidate.
                eps_p[cell] = math.inf
                inputs[cell] = (0, 1000.0, 0, 1000.0)
                continue
            phase_obs = seen.get((cell.c, cell.t % rri), ())
            seen_senders = {o.sender for o in phase_obs}
            i_h, d_h = 0, 1000.0
            hidden = [
                u
                for u in reservations.get(cell, ())
                if u not in seen_senders and self.known[row, u]
            ]
            if hidden:
                i_h = 1
                d_h = min(self._known_distance(row, listener, u) for u in hidden)
            i_e, d_e = 0, 1000.0
            exposed = [
                o.sender
                for o in phase_obs
                if o.announced is not None and o.announced != cell and self.known[row, o.sender]
            ]
            if exposed:
                i_e = 1
                d_e = min(self._known_distance(row, listener, u) for u in exposed)
            inputs[cell] = (i_h, d_h, i_e, d_e)
            if i_h == 0 and i_e == 0:
                eps_p[cell] = averages[cell]
            else:
                pending.append(cell)
                features.append((averages[cell], i_h, d_h, i_e, d_e))
        if pending:
            x = normalize_features(
                [f[0] for f in features],
                [f[1] for f in features],
                [f[2] for f in features],
                [f[3] for f in features],
                [f[4] for f in features],
            )
            outputs = denormalize_rssi(forward_batch(self.estimator, x))
            for cell, value in zip(pending, outputs):
                eps_p[cell] = float(value)
        return ProactiveView(eps_p_dbm=eps_p, inputs=inputs)

    def _known_distance(self, row: int, listener: int, sender: int) -> float:
        dx = abs(self.positions[listener] - self.known_x[row, sender])
        dx = min(dx, self.road_length - dx)
        dlat = self.lateral[listener] - self.known_lat[row, sender]
        return max(math.hypot(dx, dlat), 1.0)

    # -- metrics --------------------------------------------------------------

    def _build_metrics(self) -> RunMetrics:
        warmup = self.config.warmup_ms
        kept = [r for r in self.records if r.cell.t > warmup]
        if not kept:
            raise MetricsUndefinedError("no transmissions after warmup")
        pdr, per, pcr = compute_reliability(kept)

        gaps: list[int] = []
        starved = 0
        by_link: dict[str, list[TxRecord]] = defaultdict(list)
        for r in kept:
            if r.stream == "pam":
                by_link[r.sender].append(r)
        for link_records in by_link.values():
            try:
                _, link_gaps, _ = compute_ipg(link_records, self.config.traffic.pam_rri_ms)
            except MetricsUndefinedError:
                starved += 1
                continue
            gaps.extend(link_gaps)
        if gaps:
            gaps.sort()
            ipg_mean = sum(gaps) / len(gaps)
            ipg_p90 = float(gaps[math.ceil(0.9 * len(gaps)) - 1])
        else:
            ipg_mean = ipg_p90 = float("nan")

        done = [f for f in self.completed_fsms if f.completed]
        if self.active_fsm is not None and self.active_fsm.completed:
            done.append(self.active_fsm)
        if done:
            processing = sum(f.end_ms - f.start_ms for f in done) / len(done)
            attempts = sum(f.attempts for f in done) / len(done)
        else:
            processing = attempts = float("nan")

        return RunMetrics(
            pdr=pdr,
            per=per,
            pcr=pcr,
            ipg_mean_ms=ipg_mean,
            ipg_p90_ms=ipg_p90,
            event_processing_ms=processing,
            event_attempts=attempts,
            n_tx=len(kept),
            n_links_starved=starved,
            n_events_completed=len(done),
        )


def run_replica(
    config: RunConfig,
    rho: float,
    scheduler: SchedulerKind,
    seed: int,
    keep_records: bool = False,
) -> ReplicaResult:
    """Simulate one seeded replica; deterministic for a given (config, seed)."""
    world = SimWorld(config, rho, scheduler, seed)
    result = world.run()
    if not keep_records:
        result.records = None
    return result


@dataclass
class AggregateRow:
    rho: float
    scheduler: SchedulerKind
    n_replicas: int
    mean: dict[str, float]
    ci95: dict[str, float]


def aggregate_metrics(metrics: list[RunMetrics]) -> tuple[dict[str, float], dict[str, float]]:
    """Across-replica means and 95% confidence half-widths per metric."""
    mean: dict[str, float] = {}
    ci: dict[str, float] = {}
    for name in RunMetrics.FIELDS:
        values = np.array([getattr(m, name) for m in metrics], dtype=float)
        values = values[~np.isnan(values)]
        if values.size == 0:
            mean[name] = float("nan")
            ci[name] = float("nan")
            continue
        mean[name] = float(values.mean())
        ci[name] = (
            float(1.96 * values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
        )
    return mean, ci


def _replica_task(args):
    config, rho, scheduler, seed = args
    return run_replica(config, rho, scheduler, seed)


def run_monte_carlo(
    config: RunConfig,
    seeds: tuple[int, ...] | None = None,
    jobs: int = 1,
) -> list[AggregateRow]:
    """Sweep (density, scheduler) pairs over the seed list.

    Seeds are shared across pairs so scheduler comparisons see common random
    backgrounds. Any replica failure aborts the sweep with its seed reported.
    """
    seeds = config.seeds if seeds is None else seeds
    tasks = [
        (config, rho, scheduler, seed)
        for rho in config.rho_list
        for scheduler in config.schedulers
        for seed in seeds
    ]
    results = []
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_replica_task, task) for task in tasks]
            for task, future in zip(tasks, futures):
                try:
                    results.append(future.result())
                except Exception as exc:
                    raise RuntimeError(
                        f"replica rho={task[1]} scheduler={task[2].value} "
                        f"seed={task[3]} failed: {exc}"
                    ) from exc
    else:
        for task in tasks:
            try:
                results.append(_replica_task(task))
            except Exception as exc:
                raise RuntimeError(
                    f"replica rho={task[1]} scheduler={task[2].value} seed={task[3]} failed: {exc}"
                ) from exc

    rows: list[AggregateRow] = []
    for rho in config.rho_list:
        for scheduler in config.schedulers:
            group = [r.metrics for r in results if r.rho == rho and r.scheduler == scheduler]
            mean, ci = aggregate_metrics(group)
            rows.append(
                AggregateRow(
                    rho=rho, scheduler=scheduler, n_replicas=len(group), mean=mean, ci95=ci
                )
            )
    return rows
