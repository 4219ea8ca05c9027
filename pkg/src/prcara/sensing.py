"""Per-vehicle RSSI sensing and candidate single-subframe resource (CSR) lists.

A sensing matrix holds the RSSI measured on every pool cell over a sliding
window (1000 ms for periodic services, 100 ms for aperiodic ones). Candidate
construction folds the window by the stream's reservation interval, averages
same-phase samples in linear power, then keeps low-RSSI unreserved cells,
escalating the power threshold 3 dB at a time until at least 20% of the
window qualifies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .channel import db_to_linear, linear_to_db
from .grid import ResourceIndex, SelectionSubset

SENSING_WINDOW_PERIODIC_MS = 1000
SENSING_WINDOW_APERIODIC_MS = 100

RSRP_INIT_DBM = -110.0
RSRP_STEP_DB = 3.0
RSRP_CEILING_DBM = 0.0
CSR_MIN_FRACTION = 0.2


class HalfDuplexError(RuntimeError):
    """An RSSI sample was recorded for a subframe the owner transmitted in."""


class CsrConstructionError(RuntimeError):
    """The 20% candidate target is unreachable at the threshold ceiling."""


def phase_fold(
    values_mw: np.ndarray,
    row_subframe: np.ndarray,
    now: int,
    window_ms: int,
    rri_ms: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Average same-phase samples of a ring buffer in linear power.

    values_mw is (capacity, C) with NaN marking unsensed cells; row_subframe
    gives the absolute subframe each row holds (0 = never written). Returns
    (means_mw, counts), both (rri_ms, C); means are NaN where no samples
    exist. Phase p holds subframes t with t % rri_ms == p.
    """
    num_ch = values_mw.shape[1]
    valid = (row_subframe > max(0, now - window_ms)) & (row_subframe <= now)
    means = np.full((rri_ms, num_ch), np.nan)
    counts = np.zeros((rri_ms, num_ch), dtype=int)
    if not np.any(valid):
        return means, counts
    vals = values_mw[valid]
    phases = row_subframe[valid] % rri_ms
    sensed = ~np.isnan(vals)
    sums = np.zeros((rri_ms, num_ch))
    np.add.at(sums, phases, np.where(sensed, vals, 0.0))
    np.add.at(counts, phases, sensed.astype(int))
    with np.errstate(invalid="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return means, counts


class SensingMatrix:
    """Sliding-window RSSI store for one vehicle.

    Samples are kept per absolute subframe and averaged in linear mW; dBm is
    used only at the interface. Recording into a subframe the owner
    transmitted in raises HalfDuplexError. Reservations decoded from
    overheard SCIs are flagged per cell.
    """

    def __init__(self, num_subchannels: int, window_ms: int, noise_floor_dbm: float):
        if window_ms not in (SENSING_WINDOW_PERIODIC_MS, SENSING_WINDOW_APERIODIC_MS):
            raise ValueError("window_ms must be 1000 (periodic) or 100 (aperiodic)")
        self.num_subchannels = num_subchannels
        self.window_ms = window_ms
        self.noise_floor_dbm = noise_floor_dbm
        self._values_mw = np.full((window_ms, num_subchannels), np.nan)
        self._row_subframe = np.zeros(window_ms, dtype=int)
        self._own_tx: set[int] = set()
        self.reserved_flags: dict[ResourceIndex, bool] = {}
        self.last_subframe = 0

    def _row_for(self, t: int) -> int:
        row = t % self.window_ms
        if self._row_subframe[row] != t:
            self._values_mw[row, :] = np.nan
            self._row_subframe[row] = t
        return row

    def note_own_transmission(self, t: int) -> None:
        """Mark subframe t as spent transmitting; no sensing is possible there."""
        self._own_tx.add(t)
        if len(self._own_tx) > 4 * self.window_ms:
            horizon = self.last_subframe - self.window_ms
            self._own_tx = {s for s in self._own_tx if s > horizon}

    def record_rssi(self, cell: ResourceIndex, rssi_dbm: float) -> None:
        """Store one RSSI sample for a (subchannel, subframe) cell."""
        if cell.t in self._own_tx:
            raise HalfDuplexError(f"owner transmitted in subframe {cell.t}")
        row = self._row_for(cell.t)
        self._values_mw[row, cell.c] = db_to_linear(rssi_dbm)
        self.last_subframe = max(self.last_subframe, cell.t)

    def record_subframe(self, t: int, rssi_mw_row: np.ndarray) -> None:
        """Bulk path: store linear-mW RSSI for all subchannels of subframe t."""
        if t in self._own_tx:
            raise HalfDuplexError(f"owner transmitted in subframe {t}")
        row = self._row_for(t)
        self._values_mw[row, :] = rssi_mw_row
        self.last_subframe = max(self.last_subframe, t)

    def phase_averages(
        self, rri_ms: int, now: int | None = None, window_ms: int | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """(means_mw, counts) folded by RRI phase over the active window."""
        now = self.last_subframe if now is None else now
        window_ms = self.window_ms if window_ms is None else min(window_ms, self.window_ms)
        return phase_fold(self._values_mw, self._row_subframe, now, window_ms, rri_ms)

    def sample_count(self, c: int, phase_subframe: int, rri_ms: int) -> int:
        _, counts = self.phase_averages(rri_ms)
        return int(counts[phase_subframe % rri_ms, c])

    def cell_average_dbm(self, c: int, phase_subframe: int, rri_ms: int) -> float:
        """Folded average for one cell; noise floor when never sensed."""
        means, _ = self.phase_averages(rri_ms)
        value = means[phase_subframe % rri_ms, c]
        if np.isnan(value):
            return self.noise_floor_dbm
        return float(linear_to_db(float(value)))

    def mark_reserved(self, cell: ResourceIndex) -> None:
        self.reserved_flags[cell] = True

    def prune_reserved(self, now: int) -> None:
        self.reserved_flags = {k: v for k, v in self.reserved_flags.items() if k.t >= now}


def average_per_csr(
    matrix: SensingMatrix,
    subset: SelectionSubset,
    now: int | None = None,
    window_ms: int | None = None,
) -> dict[ResourceIndex, float]:
    """Folded average RSSI (dBm) for every candidate cell of the subset.

    Unsensed phases map to the matrix noise floor.
    """
    means_mw, _ = matrix.phase_averages(subset.rri_ms, now=now, window_ms=window_ms)
    out: dict[ResourceIndex, float] = {}
    for cell in subset.ordered():
        value = means_mw[cell.t % subset.rri_ms, cell.c]
        if np.isnan(value):
            out[cell] = matrix.noise_floor_dbm
        else:
            out[cell] = float(linear_to_db(float(value)))
    return out


def record_rssi(matrix: SensingMatrix, cell: ResourceIndex, rssi_dbm: float) -> SensingMatrix:
    """Functional wrapper over SensingMatrix.record_rssi."""
    matrix.record_rssi(cell, rssi_dbm)
    return matrix


def dump_csv(matrix: SensingMatrix, path, rri_ms: int) -> None:
    """Debug dump of the folded matrix: one row per (c, t_phase)."""
    import csv as _csv
    from pathlib import Path as _Path

    means_mw, counts = matrix.phase_averages(rri_ms)
    reserved_phases = {
        (cell.c, cell.t % rri_ms) for cell, flag in matrix.reserved_flags.items() if flag
    }
    with _Path(path).open("w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["c", "t_phase", "rssi_dbm", "samples", "reserved"])
        for c in range(matrix.num_subchannels):
            for phase in range(rri_ms):
                value = means_mw[phase, c]
                dbm = matrix.noise_floor_dbm if np.isnan(value) else float(linear_to_db(float(value)))
                writer.writerow(
                    [c, phase, repr(dbm), int(counts[phase, c]), int((c, phase) in reserved_phases)]
                )


@dataclass(frozen=True)
class CsrList:
    """Candidate cells with their averaged RSSI and the threshold that final
    construction used."""

    entries: tuple[tuple[ResourceIndex, float], ...]
    rsrp_threshold_dbm: float

    def cells(self) -> list[ResourceIndex]:
        return [cell for cell, _ in self.entries]


def build_csr(
    averages: Mapping[ResourceIndex, float],
    reserved_flags,
    subset: SelectionSubset,
    rsrp_init_dbm: float = RSRP_INIT_DBM,
    rsrp_ceiling_dbm: float = RSRP_CEILING_DBM,
) -> CsrList:
    """Steps 1-3 of the sensing-based selection procedure.

    Keeps unreserved cells with average RSSI at or below the threshold,
    raising the threshold by 3 dB until at least 20% of the subset qualifies,
    then restricts to the ceil(0.2*|subset|) lowest-RSSI survivors, breaking
    ties by (t, c). Raises CsrConstructionError when the 20% target is
    unreachable at the ceiling; callers fall back to a logged random
    in-window pick.
    """
    if isinstance(reserved_flags, Mapping):
        reserved = {cell for cell, flagged in reserved_flags.items() if flagged}
    else:
        reserved = reserved_flags
    cells = subset.ordered()
    need = CSR_MIN_FRACTION * len(cells)
    candidates = [(cell, averages[cell]) for cell in cells if cell not in reserved]
    threshold = rsrp_init_dbm
    while True:
        kept = [(cell, rssi) for cell, rssi in candidates if rssi <= threshold]
        if len(kept) >= need:
            break
        threshold += RSRP_STEP_DB
        if threshold > rsrp_ceiling_dbm:
            raise CsrConstructionError(
                f"only {len(kept)}/{len(cells)} cells qualify at ceiling "
                f"{rsrp_ceiling_dbm} dBm (need {need:.1f})"
            )
    kept.sort(key=lambda entry: (entry[1], entry[0].t, entry[0].c))
    n_final = math.ceil(need)
    return CsrList(entries=tuple(kept[:n_final]), rsrp_threshold_dbm=threshold)
