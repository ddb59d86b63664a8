import numpy as np
import pytest
from dataclasses import replace

from epicalib.abm import AbmConfig, ParameterVector, simulate_mean
from epicalib.manifest import tree_digest
from epicalib.design import (
    DEFAULT_BOUNDS,
    Bounds,
    build_dataset,
    format_design_csv,
    halton_design,
    halton_matrix,
    halton_value,
    load_dataset,
    parse_design_csv,
    scale_from_bounds,
    scale_to_bounds,
)

FAST_ABM = replace(AbmConfig(), population=1500, places=80, horizon=40, seed_infections=10)


def digit_reversal_oracle(index: int, base: int) -> float:
    # independent computation: reverse the base-b digit string of the index
    digits = []
    i = index
    while i > 0:
        digits.append(i % base)
        i //= base
    return sum(d * base ** -(k + 1) for k, d in enumerate(digits))


def ks_distance_uniform(u: np.ndarray) -> float:
    # exact KS statistic of a sample against U(0,1)
    x = np.sort(u)
    n = x.size
    grid_hi = np.arange(1, n + 1) / n
    grid_lo = np.arange(0, n) / n
    return max(np.max(grid_hi - x), np.max(x - grid_lo))


def test_halton_value_base2_base3():
    assert halton_value(1, 2) == 0.5
    assert halton_value(2, 2) == 0.25
    assert halton_value(3, 2) == 0.75
    assert halton_value(1, 3) == pytest.approx(1 / 3)
    assert halton_value(2, 3) == pytest.approx(2 / 3)
    assert halton_value(3, 3) == pytest.approx(1 / 9)


def test_halton_value_digit_reversal_oracle():
    assert halton_value(10, 2) == 0.3125
    for index in (1, 5, 10, 37, 123, 700):
        for base in (2, 3, 5, 7):
            assert halton_value(index, base) == pytest.approx(
                digit_reversal_oracle(index, base), abs=1e-15)


def test_halton_value_rejects_origin_and_bad_base():
    with pytest.raises(ValueError):
        halton_value(0, 2)
    with pytest.raises(ValueError):
        halton_value(3, 1)


def test_halton_matrix_small_cases():
    np.testing.assert_allclose(halton_matrix(1, 2), [[0.5, 1 / 3]])
    np.testing.assert_allclose(halton_matrix(3, 1), [[0.5], [0.25], [0.75]])


def test_halton_matrix_700x4_equidistributed():
    m = halton_matrix(700, 4)
    assert np.all((m > 0) & (m < 1))
    for col in range(4):
        assert ks_distance_uniform(m[:, col]) < 0.05


def test_halton_discrepancy_decreases_with_n():
    def max_ks(n):
        m = halton_matrix(n, 4)
        return max(ks_distance_uniform(m[:, c]) for c in range(4))
    assert max_ks(700) < max_ks(50)


def test_scale_to_bounds_table_values():
    unit = np.zeros((1, 4))
    scaled = scale_to_bounds(unit, DEFAULT_BOUNDS)
    assert scaled[0, 0] == 0.046
    unit = np.ones((1, 4))
    scaled = scale_to_bounds(unit, DEFAULT_BOUNDS)
    assert scaled[0, 1] == 59.0


def test_scale_identity_bounds():
    b = Bounds(np.zeros(4), np.ones(4))
    u = np.full((1, 4), 0.5)
    np.testing.assert_allclose(scale_to_bounds(u, b), u)


def test_scale_rejects_out_of_unit():
    with pytest.raises(ValueError):
        scale_to_bounds(np.array([[0.5, 1.2, 0.3, 0.4]]), DEFAULT_BOUNDS)


def test_scale_roundtrip_identity():
    rng = np.random.default_rng(0)
    u = rng.random((50, 4))
    design = scale_to_bounds(u, DEFAULT_BOUNDS)
    np.testing.assert_allclose(scale_from_bounds(design, DEFAULT_BOUNDS), u, atol=1e-12)


def test_bounds_validation():
    with pytest.raises(ValueError):
        Bounds(np.array([1.0, 0.0]), np.array([1.0, 2.0]))


def test_design_csv_roundtrip():
    d = halton_design(5)
    np.testing.assert_array_equal(parse_design_csv(format_design_csv(d)), d)


def test_build_dataset_single_row(tmp_path):
    design = DEFAULT_BOUNDS.center()[None, :]
    ds = build_dataset(design, FAST_ABM, n_seeds=2, out_dir=tmp_path / "d")
    expected = simulate_mean(ParameterVector.from_array(design[0]), FAST_ABM, 2)
    np.testing.assert_allclose(ds.responses[0], expected.stacked(), atol=1e-12)
    assert ds.n == 1 and ds.horizon == FAST_ABM.horizon


def test_build_dataset_rerun_idempotent(tmp_path):
    design = halton_design(3)
    out = tmp_path / "d"
    build_dataset(design, FAST_ABM, n_seeds=2, out_dir=out)
    snapshot = tree_digest(out)
    build_dataset(design, FAST_ABM, n_seeds=2, out_dir=out)
    assert tree_digest(out) == snapshot


def test_build_dataset_resume_skips_existing_rows(tmp_path):
    design = halton_design(3)
    out = tmp_path / "d"
    build_dataset(design, FAST_ABM, n_seeds=2, out_dir=out)
    marker = out / "responses" / "response_0001.csv"
    from epicalib.abm import DailySeries
    fake = DailySeries(np.full(FAST_ABM.horizon, 7.0), np.full(FAST_ABM.horizon, 3.0))
    marker.write_text(fake.to_csv())
    # rerun must not recompute rows whose files already exist
    ds = build_dataset(design, FAST_ABM, n_seeds=2, out_dir=out)
    assert marker.read_text() == fake.to_csv()
    np.testing.assert_array_equal(ds.responses[1], fake.stacked())


def test_build_dataset_eight_rows_matches_bruteforce(tmp_path):
    design = halton_design(8)
    ds = build_dataset(design, FAST_ABM, n_seeds=2, out_dir=tmp_path / "d")
    for i in range(8):
        brute = simulate_mean(ParameterVector.from_array(design[i]), FAST_ABM, 2)
        np.testing.assert_allclose(ds.responses[i], brute.stacked(), atol=1e-12)


def test_build_dataset_parallel_matches_serial(tmp_path):
    design = halton_design(4)
    ds1 = build_dataset(design, FAST_ABM, n_seeds=2, out_dir=tmp_path / "serial", threads=1)
    ds2 = build_dataset(design, FAST_ABM, n_seeds=2, out_dir=tmp_path / "par", threads=2)
    np.testing.assert_array_equal(ds1.responses, ds2.responses)
    # the files themselves must be identical too
    for i in range(4):
        a = (tmp_path / "serial" / "responses" / f"response_{i:04d}.csv").read_bytes()
        b = (tmp_path / "par" / "responses" / f"response_{i:04d}.csv").read_bytes()
        assert a == b


def test_build_dataset_rejects_out_of_bounds(tmp_path):
    bad = np.array([[0.01, 40.0, 0.95, 0.45]])
    with pytest.raises(ValueError):
        build_dataset(bad, FAST_ABM, n_seeds=1, out_dir=tmp_path / "d")


def test_load_dataset_roundtrip(tmp_path):
    design = halton_design(3)
    ds = build_dataset(design, FAST_ABM, n_seeds=2, out_dir=tmp_path / "d")
    loaded = load_dataset(tmp_path / "d")
    np.testing.assert_array_equal(loaded.design, ds.design)
    np.testing.assert_array_equal(loaded.responses, ds.responses)
    assert loaded.n_seeds == 2
