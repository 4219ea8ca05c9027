"""The five resource-selection algorithms.

All of them return a single cell inside the caller's selection subset:

* sb_sps_select: random pick from the CSR, then reuse it while the
  reselection counter stays positive.
* sb_ds_select: fresh random pick from the CSR on every transmission.
* ext_sci_avoid_select: SB-DS plus exclusion of the subframes the primary
  communication targets announced via extended SCI.
* min_rssi_select: argmin of the estimated proactive RSSI over the window.
* pr_cara_select: reserved-subframe exclusion, then the 20%/+3 dB threshold
  loop on proactive RSSI, then a uniform pick among the bottom-20% survivors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional

import numpy as np

from .grid import ResourceIndex, SelectionSubset
from .sensing import (
    CSR_MIN_FRACTION,
    RSRP_CEILING_DBM,
    RSRP_INIT_DBM,
    RSRP_STEP_DB,
    CsrList,
)

log = logging.getLogger(__name__)

# Reselection counter ranges by reservation interval (3GPP-style scaling).
RC_RANGE_100MS = (5, 15)
RC_RANGE_20MS = (25, 75)


class SchedulerKind(Enum):
    SB_SPS = "sb-sps"
    SB_DS = "sb-ds"
    EXT_SCI_AVOID = "ext-sci-avoid"
    MIN_RSSI = "min-rssi"
    PR_CARA = "pr-cara"


def rc_range_for(rri_ms: int) -> tuple[int, int]:
    return RC_RANGE_20MS if rri_ms <= 20 else RC_RANGE_100MS


@dataclass(frozen=True)
class SpsState:
    """Semi-persistent scheduling state: the held resource and its counter."""

    rri_ms: int
    current_resource: Optional[ResourceIndex] = None
    rc: int = 0
    rc_range: tuple[int, int] = RC_RANGE_100MS

    def __post_init__(self) -> None:
        if self.rc < 0:
            raise ValueError("reselection counter must be >= 0")
        if (self.current_resource is not None) != (self.rc > 0):
            raise ValueError("resource must be held iff the counter is positive")
        if self.rc_range[0] < 1 or self.rc_range[0] > self.rc_range[1]:
            raise ValueError("rc_range must satisfy 1 <= lo <= hi")


@dataclass(frozen=True)
class ProactiveView:
    """Estimated proactive RSSI per candidate cell, plus the assembled
    (hidden indicator, hidden distance, exposed indicator, exposed distance)
    inputs that produced each estimate."""

    eps_p_dbm: dict[ResourceIndex, float]
    inputs: dict[ResourceIndex, tuple[int, float, int, float]] = field(default_factory=dict)


def _uniform_pick(cells: list[ResourceIndex], rng: np.random.Generator) -> ResourceIndex:
    return cells[int(rng.integers(len(cells)))]


def sb_sps_select(
    state: SpsState, csr: Optional[CsrList], rng: np.random.Generator
) -> tuple[ResourceIndex, SpsState]:
    """Reuse the held resource one window later while RC > 0, otherwise pick
    uniformly from the CSR and draw a fresh counter.

    The CSR is only consulted on the fresh-pick branch and may be None while
    the counter is positive.
    """
    if state.rc > 0 and state.current_resource is not None:
        cell = state.current_resource.shifted(state.rri_ms)
        rc = state.rc - 1
        return cell, replace(state, current_resource=cell if rc > 0 else None, rc=rc)
    if csr is None:
        raise ValueError("a CSR is required when the reselection counter is exhausted")
    cell = _uniform_pick(csr.cells(), rng)
    rc = int(rng.integers(state.rc_range[0], state.rc_range[1] + 1))
    return cell, replace(state, current_resource=cell, rc=rc)


def sb_ds_select(csr: CsrList, rng: np.random.Generator) -> ResourceIndex:
    """Uniform pick from the CSR; no state carries over."""
    return _uniform_pick(csr.cells(), rng)


def ext_sci_avoid_select(
    csr: CsrList, reserved_subframes: Iterable[int], rng: np.random.Generator
) -> ResourceIndex:
    """Uniform pick among CSR cells outside the reserved subframes, falling
    back to the full CSR when the exclusion empties it."""
    reserved = set(reserved_subframes)
    usable = [cell for cell in csr.cells() if cell.t not in reserved]
    if not usable:
        log.debug("reserved subframes cover the whole CSR; falling back to full list")
        usable = csr.cells()
    return _uniform_pick(usable, rng)


def min_rssi_select(view: ProactiveView, subset: SelectionSubset) -> ResourceIndex:
    """Cell with the minimum estimated proactive RSSI; ties break by (t, c)."""
    return min(subset.ordered(), key=lambda cell: (view.eps_p_dbm[cell], cell.t, cell.c))


def pr_cara_select(
    view: ProactiveView,
    subset: SelectionSubset,
    reserved_subframes: Iterable[int],
    rng: np.random.Generator,
    rsrp_init_dbm: float = RSRP_INIT_DBM,
    rsrp_ceiling_dbm: float = RSRP_CEILING_DBM,
    stats: dict | None = None,
) -> ResourceIndex:
    """Collision-avoiding selection on proactive RSSI.

    Removes cells in the primary targets' reserved subframes, escalates the
    power threshold by 3 dB until at least 20% of the window qualifies, then
    picks uniformly among the ceil(0.2*|subset|) lowest-RSSI survivors. When
    the target is unreachable it falls back to a uniform pick, preferring
    unreserved cells, and counts the event in stats["fallbacks"].
    """
    cells = subset.ordered()
    reserved = set(reserved_subframes)
    candidates = [cell for cell in cells if cell.t not in reserved]
    need = CSR_MIN_FRACTION * len(cells)
    threshold = rsrp_init_dbm
    kept: list[ResourceIndex] = []
    while True:
        kept = [cell for cell in candidates if view.eps_p_dbm[cell] <= threshold]
        if len(kept) >= need:
            break
        threshold += RSRP_STEP_DB
        if threshold > rsrp_ceiling_dbm:
            log.debug(
                "proactive CSR unreachable (%d/%d cells at ceiling); random fallback",
                len(kept),
                len(cells),
            )
            if stats is not None:
                stats["fallbacks"] = stats.get("fallbacks", 0) + 1
            return _uniform_pick(candidates if candidates else cells, rng)
    kept.sort(key=lambda cell: (view.eps_p_dbm[cell], cell.t, cell.c))
    bottom = kept[: math.ceil(need)]
    return _uniform_pick(bottom, rng)
