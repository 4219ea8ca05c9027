import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prcara.grid import (
    HorizonError,
    ResourceGrid,
    ResourceIndex,
    SelectionSubset,
    assert_single_allocation,
    selection_subset,
    selection_window,
)


def brute_force_window(k: int, rri: int, num_ch: int) -> set[ResourceIndex]:
    """Direct scan of all cells against the (k-1)*tau < t <= k*tau predicate."""
    return {
        ResourceIndex(c, t)
        for c in range(num_ch)
        for t in range(1, k * rri + 1)
        if (k - 1) * rri < t <= k * rri
    }


def test_first_window_covers_first_rri():
    grid = ResourceGrid(num_subchannels=5, horizon=1000)
    subset = selection_subset("veh", 1, 20, grid)
    assert len(subset) == 100
    assert {cell.t for cell in subset.cells} == set(range(1, 21))
    assert {cell.c for cell in subset.cells} == set(range(5))


def test_second_window_at_100ms_rri():
    grid = ResourceGrid(num_subchannels=5, horizon=1000)
    subset = selection_subset("veh", 2, 100, grid)
    assert {cell.t for cell in subset.cells} == set(range(101, 201))
    assert len(subset) == 500


def test_window_matches_brute_force_scan():
    grid = ResourceGrid(num_subchannels=2, horizon=200)
    subset = selection_subset("veh", 3, 20, grid)
    assert len(subset) == 40
    assert subset.cells == brute_force_window(3, 20, 2)


@settings(max_examples=100, deadline=None)
@given(
    k=st.integers(min_value=1, max_value=8),
    rri=st.integers(min_value=1, max_value=40),
    num_ch=st.integers(min_value=1, max_value=6),
)
def test_window_property_vs_brute_force(k, rri, num_ch):
    grid = ResourceGrid(num_subchannels=num_ch, horizon=k * rri)
    subset = selection_subset("veh", k, rri, grid)
    assert subset.cells == brute_force_window(k, rri, num_ch)
    assert len(subset) == num_ch * rri


def test_windows_tile_grid_exactly_once():
    grid = ResourceGrid(num_subchannels=3, horizon=120)
    counts: dict[ResourceIndex, int] = {}
    for k in range(1, 120 // 20 + 1):
        for cell in selection_subset("veh", k, 20, grid).cells:
            counts[cell] = counts.get(cell, 0) + 1
    assert len(counts) == 3 * 120
    assert set(counts.values()) == {1}


def test_window_past_horizon_raises():
    grid = ResourceGrid(num_subchannels=5, horizon=100)
    with pytest.raises(HorizonError):
        selection_subset("veh", 6, 20, grid)


def test_selection_window_from_generation_time():
    subset = selection_window("veh", generated_at=105, rri_ms=20, num_subchannels=2)
    assert {cell.t for cell in subset.cells} == set(range(106, 126))


def test_invalid_preconditions():
    grid = ResourceGrid(num_subchannels=5, horizon=100)
    with pytest.raises(ValueError):
        selection_subset("veh", 0, 20, grid)
    with pytest.raises(ValueError):
        selection_subset("veh", 1, 0, grid)
    with pytest.raises(ValueError):
        ResourceGrid(num_subchannels=0, horizon=10)


def test_single_allocation_predicate():
    grid = ResourceGrid(num_subchannels=5, horizon=100)
    subset = selection_subset("veh", 1, 20, grid)
    inside = ResourceIndex(2, 7)
    outside = ResourceIndex(2, 21)
    assert assert_single_allocation({inside}, subset)
    assert not assert_single_allocation(set(), subset)
    assert not assert_single_allocation({inside, ResourceIndex(3, 9)}, subset)
    assert not assert_single_allocation({outside}, subset)
    assert not assert_single_allocation({inside, outside}, subset)


def test_ordered_is_by_time_then_channel():
    subset = selection_window("veh", 0, 3, 2)
    assert subset.ordered() == [
        ResourceIndex(0, 1),
        ResourceIndex(1, 1),
        ResourceIndex(0, 2),
        ResourceIndex(1, 2),
        ResourceIndex(0, 3),
        ResourceIndex(1, 3),
    ]


def test_empty_subset_rejected():
    with pytest.raises(ValueError):
        SelectionSubset("veh", 1, 20, frozenset())
