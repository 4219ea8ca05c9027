import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prcara.channel import db_to_linear, linear_to_db
from prcara.grid import ResourceIndex, selection_window
from prcara.sensing import (
    CsrConstructionError,
    HalfDuplexError,
    SensingMatrix,
    average_per_csr,
    build_csr,
    dump_csv,
    record_rssi,
)

NOISE_FLOOR = -91.99


def make_matrix(window_ms=100, num_ch=2):
    return SensingMatrix(num_subchannels=num_ch, window_ms=window_ms, noise_floor_dbm=NOISE_FLOOR)


def brute_force_csr(averages, reserved, subset, init=-110.0, ceiling=0.0, step=3.0):
    """Literal reimplementation of the threshold walk, used as the oracle."""
    cells = sorted(subset.cells, key=lambda cell: (cell.t, cell.c))
    need = 0.2 * len(cells)
    threshold = init
    while True:
        kept = [c for c in cells if c not in reserved and averages[c] <= threshold]
        if len(kept) >= need:
            break
        threshold += step
        if threshold > ceiling:
            return None
    kept.sort(key=lambda c: (averages[c], c.t, c.c))
    return kept[: math.ceil(need)], threshold


def test_single_sample_average():
    m = make_matrix()
    record_rssi(m, ResourceIndex(0, 5), -95.0)
    assert m.cell_average_dbm(0, 5, 20) == pytest.approx(-95.0)
    assert m.sample_count(0, 5, 20) == 1


def test_equal_samples_average_unchanged():
    m = make_matrix()
    m.record_rssi(ResourceIndex(0, 5), -90.0)
    m.record_rssi(ResourceIndex(0, 25), -90.0)
    assert m.cell_average_dbm(0, 5, 20) == pytest.approx(-90.0)
    assert m.sample_count(0, 25, 20) == 2


def test_linear_domain_averaging():
    m = make_matrix()
    m.record_rssi(ResourceIndex(0, 5), -90.0)
    m.record_rssi(ResourceIndex(0, 25), -100.0)
    # 10*log10((1e-9 + 1e-10)/2 * 1e3 scale) done by hand: -92.5963 dBm.
    expected = linear_to_db((db_to_linear(-90.0) + db_to_linear(-100.0)) / 2.0)
    assert expected == pytest.approx(-92.596, abs=5e-4)
    assert m.cell_average_dbm(0, 5, 20) == pytest.approx(expected, abs=1e-9)


def test_half_duplex_violation():
    m = make_matrix()
    m.note_own_transmission(7)
    with pytest.raises(HalfDuplexError):
        m.record_rssi(ResourceIndex(0, 7), -90.0)
    with pytest.raises(HalfDuplexError):
        m.record_subframe(7, np.array([1e-9, 1e-9]))


def test_constant_window_folds_to_constant():
    m = make_matrix(window_ms=100)
    for t in range(1, 101):
        m.record_subframe(t, np.full(2, db_to_linear(-94.0)))
    subset = selection_window("v", 100, 20, 2)
    averages = average_per_csr(m, subset, now=100)
    assert len(averages) == 40
    for value in averages.values():
        assert value == pytest.approx(-94.0, abs=1e-9)


def test_alternating_periods_fold_to_linear_mean():
    m = make_matrix(window_ms=100)
    for t in range(1, 101):
        level = -90.0 if ((t - 1) // 20) % 2 == 0 else -100.0
        m.record_subframe(t, np.full(2, db_to_linear(level)))
    subset = selection_window("v", 100, 20, 2)
    averages = average_per_csr(m, subset, now=100)
    # Three -90 periods and two -100 periods in the window.
    expected = linear_to_db((3 * db_to_linear(-90.0) + 2 * db_to_linear(-100.0)) / 5.0)
    for value in averages.values():
        assert value == pytest.approx(expected, abs=1e-9)


def test_unsensed_phase_maps_to_noise_floor():
    m = make_matrix(window_ms=100)
    m.record_rssi(ResourceIndex(0, 5), -90.0)
    subset = selection_window("v", 100, 20, 2)
    averages = average_per_csr(m, subset, now=100)
    assert averages[ResourceIndex(0, 105)] == pytest.approx(-90.0)
    assert averages[ResourceIndex(1, 105)] == pytest.approx(NOISE_FLOOR)
    assert averages[ResourceIndex(0, 110)] == pytest.approx(NOISE_FLOOR)


def test_samples_outside_window_ignored():
    m = make_matrix(window_ms=100)
    m.record_rssi(ResourceIndex(0, 5), -50.0)
    m.record_rssi(ResourceIndex(0, 205), -90.0)
    subset = selection_window("v", 220, 20, 2)
    averages = average_per_csr(m, subset, now=220)
    assert averages[ResourceIndex(0, 225)] == pytest.approx(-90.0)


def test_order_independence_of_averaging():
    samples = [(ResourceIndex(0, 5 + 20 * k), -90.0 - k) for k in range(5)]
    m1, m2 = make_matrix(), make_matrix()
    for cell, v in samples:
        m1.record_rssi(cell, v)
    for cell, v in reversed(samples):
        m2.record_rssi(cell, v)
    assert m1.cell_average_dbm(0, 5, 20) == pytest.approx(m2.cell_average_dbm(0, 5, 20), abs=1e-9)


def test_window_class_validation():
    with pytest.raises(ValueError):
        SensingMatrix(2, 500, NOISE_FLOOR)
    SensingMatrix(2, 1000, NOISE_FLOOR)
    SensingMatrix(2, 100, NOISE_FLOOR)


def test_build_csr_worked_example():
    # 10-cell subset (C=1, tau=10); three cells at -120, seven at -100.
    subset = selection_window("v", 0, 10, 1)
    cells = subset.ordered()
    averages = {cell: (-120.0 if i < 3 else -100.0) for i, cell in enumerate(cells)}
    csr = build_csr(averages, set(), subset, rsrp_init_dbm=-110.0)
    assert csr.rsrp_threshold_dbm == pytest.approx(-110.0)
    assert len(csr.entries) == 2
    assert all(rssi == -120.0 for _, rssi in csr.entries)
    assert csr.cells() == cells[:2]


def test_build_csr_threshold_escalates():
    subset = selection_window("v", 0, 10, 1)
    averages = {cell: -95.0 for cell in subset.cells}
    csr = build_csr(averages, set(), subset, rsrp_init_dbm=-110.0)
    # -110 -> -107 -> ... first threshold >= -95 is -95.
    assert csr.rsrp_threshold_dbm == pytest.approx(-95.0)
    assert len(csr.entries) == 2


def test_build_csr_all_reserved_fails():
    subset = selection_window("v", 0, 10, 1)
    averages = {cell: -120.0 for cell in subset.cells}
    with pytest.raises(CsrConstructionError):
        build_csr(averages, set(subset.cells), subset)


def test_build_csr_tie_break_lexicographic():
    subset = selection_window("v", 0, 10, 2)
    averages = {cell: -100.0 for cell in subset.cells}
    csr = build_csr(averages, set(), subset)
    assert csr.cells() == subset.ordered()[: math.ceil(0.2 * 20)]


def test_build_csr_respects_reserved_flags_mapping():
    subset = selection_window("v", 0, 10, 1)
    cells = subset.ordered()
    averages = {cell: -120.0 for cell in cells}
    reserved = {cells[0]: True, cells[1]: False}
    csr = build_csr(averages, reserved, subset)
    assert cells[0] not in csr.cells()
    assert cells[1] in csr.cells()


def test_dump_csv_rows(tmp_path):
    import csv

    m = make_matrix(window_ms=100, num_ch=2)
    m.record_rssi(ResourceIndex(0, 5), -90.0)
    m.mark_reserved(ResourceIndex(1, 107))
    path = tmp_path / "matrix.csv"
    dump_csv(m, path, rri_ms=20)
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 20
    by_key = {(int(r["c"]), int(r["t_phase"])): r for r in rows}
    assert float(by_key[(0, 5)]["rssi_dbm"]) == pytest.approx(-90.0)
    assert int(by_key[(0, 5)]["samples"]) == 1
    assert int(by_key[(1, 7)]["reserved"]) == 1
    assert float(by_key[(1, 3)]["rssi_dbm"]) == pytest.approx(NOISE_FLOOR)
    assert int(by_key[(1, 3)]["samples"]) == 0


@settings(max_examples=150, deadline=None)
@given(st.data())
def test_build_csr_matches_brute_force(data):
    rri = data.draw(st.integers(min_value=5, max_value=40))
    num_ch = data.draw(st.integers(min_value=1, max_value=5))
    subset = selection_window("v", 0, rri, num_ch)
    cells = subset.ordered()
    rssi_values = data.draw(
        st.lists(
            st.floats(min_value=-130.0, max_value=-60.0),
            min_size=len(cells),
            max_size=len(cells),
        )
    )
    averages = dict(zip(cells, rssi_values))
    n_reserved = data.draw(st.integers(min_value=0, max_value=len(cells)))
    reserved = set(cells[:n_reserved])
    expected = brute_force_csr(averages, reserved, subset)
    if expected is None:
        with pytest.raises(CsrConstructionError):
            build_csr(averages, reserved, subset)
    else:
        csr = build_csr(averages, reserved, subset)
        assert csr.cells() == expected[0]
        assert csr.rsrp_threshold_dbm == pytest.approx(expected[1])
