"""Time-frequency resource pool geometry and per-transmission selection windows.

Subframes are 1 ms and indexed from 1; subchannels are indexed from 0. A
traffic stream with reservation interval ``rri_ms`` partitions the pool into
windows of ``rri_ms`` consecutive subframes, and exactly one cell per window
is allocated to each transmission.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class HorizonError(ValueError):
    """Selection window extends past the grid horizon."""


@dataclass(frozen=True, order=True)
class ResourceIndex:
    """One (subchannel, subframe) cell of the resource pool."""

    c: int
    t: int

    def shifted(self, dt: int) -> "ResourceIndex":
        return ResourceIndex(self.c, self.t + dt)


def _cell_hash(cell: ResourceIndex) -> int:
    return cell.t * 1_048_576 + cell.c


# Cells key large dicts and sets on every selection; a flat integer hash is
# measurably cheaper than the generated tuple hash.
ResourceIndex.__hash__ = _cell_hash  # type: ignore[method-assign]


@dataclass(frozen=True)
class ResourceGrid:
    """Pool geometry: C subchannels over a horizon of T subframes."""

    num_subchannels: int
    horizon: int
    subchannel_width_rb: int = 20
    bandwidth_hz: float = 20e6

    def __post_init__(self) -> None:
        if self.num_subchannels < 1:
            raise ValueError("num_subchannels must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.subchannel_width_rb < 1:
            raise ValueError("subchannel_width_rb must be >= 1")

    def contains(self, cell: ResourceIndex) -> bool:
        return 0 <= cell.c < self.num_subchannels and 1 <= cell.t <= self.horizon


@dataclass(frozen=True)
class SelectionSubset:
    """All cells a stream may use for one transmission.

    For transmission k at reservation interval tau the subframes covered are
    (k-1)*tau < t <= k*tau; the subset is never empty.
    """

    owner: object
    transmission_index: int
    rri_ms: int
    cells: frozenset[ResourceIndex] = field(repr=False)

    def __post_init__(self) -> None:
        if not self.cells:
            raise ValueError("selection subset must be non-empty")

    def __len__(self) -> int:
        return len(self.cells)

    def __contains__(self, cell: ResourceIndex) -> bool:
        return cell in self.cells

    def ordered(self) -> list[ResourceIndex]:
        """Cells sorted by (t, c); the canonical iteration order."""
        cached = getattr(self, "_ordered", None)
        if cached is None:
            cached = sorted(self.cells, key=lambda cell: (cell.t, cell.c))
            object.__setattr__(self, "_ordered", cached)
        return cached

    def subframes(self) -> range:
        t_lo = min(cell.t for cell in self.cells)
        t_hi = max(cell.t for cell in self.cells)
        return range(t_lo, t_hi + 1)


def selection_window(
    owner: object,
    generated_at: int,
    rri_ms: int,
    num_subchannels: int,
    transmission_index: int = 1,
) -> SelectionSubset:
    """Selection subset {t0+1 .. t0+rri} x all subchannels for a packet
    generated at subframe t0."""
    if rri_ms < 1:
        raise ValueError("rri_ms must be >= 1")
    cells = frozenset(
        ResourceIndex(c, t)
        for c in range(num_subchannels)
        for t in range(generated_at + 1, generated_at + rri_ms + 1)
    )
    return SelectionSubset(owner, transmission_index, rri_ms, cells)


def selection_subset(
    owner: object,
    transmission_index: int,
    rri_ms: int,
    grid: ResourceGrid,
) -> SelectionSubset:
    """Cells available to transmission k of a stream with the given RRI.

    Covers subframes (k-1)*rri < t <= k*rri over all subchannels. Raises
    HorizonError when the window extends past the grid horizon.
    """
    if transmission_index < 1:
        raise ValueError("transmission_index must be >= 1")
    if rri_ms < 1:
        raise ValueError("rri_ms must be >= 1")
    if transmission_index * rri_ms > grid.horizon:
        raise HorizonError(
            f"window {transmission_index} at rri {rri_ms} ms ends at "
            f"{transmission_index * rri_ms} > horizon {grid.horizon}"
        )
    return selection_window(
        owner,
        (transmission_index - 1) * rri_ms,
        rri_ms,
        grid.num_subchannels,
        transmission_index,
    )


def assert_single_allocation(chosen: set[ResourceIndex], subset: SelectionSubset) -> bool:
    """True iff exactly one cell is chosen and it lies inside the subset."""
    chosen = set(chosen)
    return len(chosen) == 1 and chosen <= subset.cells
