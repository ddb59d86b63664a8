import numpy as np
import pytest

from epicalib.design import Bounds, TrainingDataset, halton_matrix, scale_to_bounds
from epicalib.gp import (
    GPModel,
    SingularGramError,
    cross_validate,
    fit,
    laplacian_kernel,
    load_model,
    log_marginal_likelihood,
    predict,
    predict_batch,
    save_model,
    select_hyperparameters,
    solve_coefficients,
    _gram,
)

UNIT = Bounds(np.zeros(4), np.ones(4))


def smooth_dataset(n=60, horizon=4, seed=0) -> TrainingDataset:
    """Smooth synthetic responses over the unit cube (no ABM involved)."""
    design = halton_matrix(n, 4)
    t = np.arange(1, horizon + 1)
    rows = []
    for x in design:
        h = 60 + 40 * np.sin(2.0 * x[0] + x[1]) + 10 * x[2] * t
        d = 20 + 15 * np.cos(1.5 * x[0]) + 5 * x[3] + t
        rows.append(np.concatenate([h, d]))
    return TrainingDataset(design=design, responses=np.array(rows), n_seeds=1,
                           bounds=UNIT, horizon=horizon)


def test_kernel_zero_distance_is_one():
    x = np.array([0.3, 0.4, 0.5, 0.6])
    assert laplacian_kernel(x, x, 0.7) == 1.0


def test_kernel_unit_l1_distance():
    x = np.array([1.0, 0.0, 0.0, 0.0])
    y = np.zeros(4)
    assert laplacian_kernel(x, y, 1.0) == pytest.approx(np.exp(-1.0))


def test_kernel_direct_arithmetic_oracle():
    x = np.array([0.1, 0.2, 0.3, 0.4])
    y = np.array([0.4, 0.2, 0.1, 0.0])
    # L1 distance = 0.3 + 0.0 + 0.2 + 0.4 = 0.9
    assert laplacian_kernel(x, y, 0.5) == pytest.approx(np.exp(-1.8), rel=1e-14)


def test_kernel_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        laplacian_kernel(np.zeros(4), np.ones(4), 0.0)


def test_gram_symmetric_unit_diagonal():
    rng = np.random.default_rng(1)
    pts = rng.random((30, 4))
    gram, _ = _gram(pts, 0.4)
    assert np.max(np.abs(gram - gram.T)) < 1e-14
    assert np.all(np.diag(gram) == 1.0)


def test_one_by_one_solve_identity():
    # K([t],[t]) = 1, so alpha = y / (1 + nugget)
    y = np.array([[2.5, -1.0]])
    for nugget in (0.001, 0.1, 1.0):
        alpha = solve_coefficients(np.array([[1.0]]), nugget, y)
        np.testing.assert_allclose(alpha, y / (1.0 + nugget), rtol=1e-12)


def test_single_point_fit_predicts_training_response():
    ds = smooth_dataset(n=1)
    model = fit(ds, length_scale=0.5, nugget=0.01)
    np.testing.assert_allclose(predict_batch(model, ds.design)[0], ds.responses[0],
                               rtol=1e-10)


def test_fit_matches_dense_solve_oracle():
    ds = smooth_dataset(n=3)
    model = fit(ds, length_scale=0.8, nugget=0.05)
    # independent dense solve
    x = ds.design  # unit bounds: normalization is the identity
    dist = np.abs(x[:, None, :] - x[None, :, :]).sum(axis=2)
    system = np.exp(-dist / 0.8) + 0.05 * np.eye(3)
    ystd = (ds.responses - ds.responses.mean(0)) / ds.responses.std(0)
    expected = np.linalg.solve(system, ystd)
    np.testing.assert_allclose(model.alpha, expected, rtol=1e-10)


def test_fit_residual_invariant():
    ds = smooth_dataset(n=40)
    model = fit(ds, length_scale=0.6, nugget=0.01)
    gram, _ = _gram(model.train_normalized, model.length_scale)
    system = gram + model.nugget * np.eye(ds.n)
    ystd = (ds.responses - model.out_mean) / model.out_std
    residual = system @ model.alpha - ystd
    assert np.linalg.norm(residual) < 1e-8 * np.linalg.norm(ystd)


def test_duplicated_row_regularized_by_nugget():
    ds = smooth_dataset(n=10)
    design = np.vstack([ds.design, ds.design[0]])
    responses = np.vstack([ds.responses, ds.responses[0]])
    dup = TrainingDataset(design=design, responses=responses, n_seeds=1,
                          bounds=UNIT, horizon=ds.horizon)
    model = fit(dup, length_scale=0.5, nugget=0.001)
    assert np.all(np.isfinite(model.alpha))


def test_fit_rejects_zero_nugget_duplicates():
    ds = smooth_dataset(n=6)
    design = np.vstack([ds.design, ds.design[0]])
    responses = np.vstack([ds.responses, ds.responses[0]])
    dup = TrainingDataset(design=design, responses=responses, n_seeds=1,
                          bounds=UNIT, horizon=ds.horizon)
    with pytest.raises(SingularGramError):
        fit(dup, length_scale=0.5, nugget=0.0)


def test_predict_near_interpolation_with_small_nugget():
    ds = smooth_dataset(n=50)
    model = fit(ds, length_scale=0.5, nugget=0.001)
    pred = predict_batch(model, ds.design)
    rel = np.abs(pred - ds.responses) / np.maximum(np.abs(ds.responses), 1.0)
    assert rel.max() < 0.005


def test_predict_far_point_reverts_to_training_mean():
    ds = smooth_dataset(n=20)
    model = fit(ds, length_scale=0.3, nugget=0.01)
    far = np.full((1, 4), 50.0)
    np.testing.assert_allclose(predict_batch(model, far)[0], ds.responses.mean(0),
                               rtol=0, atol=1e-9)


def test_predict_matches_direct_summation_oracle():
    ds = smooth_dataset(n=25)
    model = fit(ds, length_scale=0.7, nugget=0.02)
    rng = np.random.default_rng(3)
    point = rng.random(4)
    # brute-force evaluation of the basis-function form, plain loops
    expected = np.zeros(2 * ds.horizon)
    for i in range(ds.n):
        k = np.exp(-np.abs(model.train_normalized[i] - point).sum() / model.length_scale)
        expected += k * model.alpha[i]
    expected = expected * model.out_std + model.out_mean
    np.testing.assert_allclose(predict_batch(model, point[None])[0], expected, rtol=1e-12)


def test_predict_continuity_lipschitz_bound():
    ds = smooth_dataset(n=30)
    model = fit(ds, length_scale=0.5, nugget=0.01)
    rng = np.random.default_rng(4)
    theta = rng.random(4)
    delta = np.full(4, 1e-6)
    a = predict_batch(model, theta[None])[0]
    b = predict_batch(model, (theta + delta)[None])[0]
    bound = np.abs(model.alpha).sum(axis=0) * (delta.sum() / model.length_scale) * model.out_std
    assert np.all(np.abs(a - b) <= bound + 1e-15)


def test_predict_single_returns_daily_series():
    ds = smooth_dataset(n=10)
    model = fit(ds, length_scale=0.5, nugget=0.01)
    series = predict(model, ds.design[0])
    assert series.horizon == ds.horizon


def test_cv_constant_responses_zero_error():
    design = halton_matrix(20, 4)
    responses = np.full((20, 6), 42.0)
    ds = TrainingDataset(design=design, responses=responses, n_seeds=1,
                         bounds=UNIT, horizon=3)
    report = cross_validate(ds, 5, length_scale=0.5, nugget=0.01)
    assert report.pooled_median == 0.0


def test_cv_loo_matches_bruteforce():
    ds = smooth_dataset(n=10)
    report = cross_validate(ds, 10, length_scale=0.5, nugget=0.01, shuffle_seed=7)
    # independent LOO: fit on the other 9 points, predict the held-out one
    errors = {}
    for i in range(10):
        rest = [j for j in range(10) if j != i]
        train = TrainingDataset(design=ds.design[rest], responses=ds.responses[rest],
                                n_seeds=1, bounds=UNIT, horizon=ds.horizon)
        model = fit(train, 0.5, 0.01)
        pred = predict_batch(model, ds.design[i][None])[0]
        errors[i] = np.abs(pred - ds.responses[i]) / np.maximum(np.abs(ds.responses[i]), 1.0)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(7)))
    order = rng.permutation(10)
    expected = np.concatenate([errors[i] for i in order])
    np.testing.assert_allclose(np.sort(report.errors), np.sort(expected), rtol=1e-12)
    assert report.pooled_median == pytest.approx(np.median(expected), rel=1e-12)


def test_cv_reproducible_given_seed():
    ds = smooth_dataset(n=30)
    a = cross_validate(ds, 5, 0.5, 0.01, shuffle_seed=3)
    b = cross_validate(ds, 5, 0.5, 0.01, shuffle_seed=3)
    assert a.fold_medians == b.fold_medians
    np.testing.assert_array_equal(a.errors, b.errors)
    c = cross_validate(ds, 5, 0.5, 0.01, shuffle_seed=4)
    assert a.fold_medians != c.fold_medians


def test_cv_rejects_bad_fold_counts():
    ds = smooth_dataset(n=10)
    with pytest.raises(ValueError):
        cross_validate(ds, 1, 0.5, 0.01)
    with pytest.raises(ValueError):
        cross_validate(ds, 11, 0.5, 0.01)


def test_training_error_monotone_in_nugget():
    ds = smooth_dataset(n=40)
    errs = []
    for nugget in (0.001, 0.01, 0.1, 1.0):
        model = fit(ds, length_scale=0.5, nugget=nugget)
        pred = predict_batch(model, ds.design)
        errs.append(np.mean(np.abs(pred - ds.responses)
                            / np.maximum(np.abs(ds.responses), 1.0)))
    assert errs == sorted(errs)


def test_lml_gradient_matches_finite_difference():
    ds = smooth_dataset(n=25)
    x = ds.design
    ystd = (ds.responses - ds.responses.mean(0)) / ds.responses.std(0)
    l0, h = 0.4, 1e-6
    _, grad = log_marginal_likelihood(x, ystd, l0, 0.01, with_gradient=True)
    fd = (log_marginal_likelihood(x, ystd, l0 + h, 0.01)
          - log_marginal_likelihood(x, ystd, l0 - h, 0.01)) / (2 * h)
    assert grad == pytest.approx(fd, rel=1e-5)


def test_select_singleton_grid_returns_that_nugget():
    ds = smooth_dataset(n=40)
    sel = select_hyperparameters(ds, nugget_grid=[0.01], folds=4)
    assert sel.nugget == 0.01
    assert sel.length_scale > 0


def test_select_recovers_generating_length_scale():
    # draw responses from a GP with a known kernel scale on the unit cube
    rng = np.random.default_rng(11)
    design = halton_matrix(80, 4)
    true_l = 0.3
    dist = np.abs(design[:, None, :] - design[None, :, :]).sum(axis=2)
    cov = np.exp(-dist / true_l) + 1e-8 * np.eye(80)
    chol = np.linalg.cholesky(cov)
    draws = chol @ rng.standard_normal((80, 6))
    responses = 100.0 + 10.0 * draws  # keep responses positive
    ds = TrainingDataset(design=design, responses=responses, n_seeds=1,
                         bounds=UNIT, horizon=3)
    sel = select_hyperparameters(ds, nugget_grid=[0.001], folds=5)
    assert abs(sel.length_scale - true_l) / true_l < 0.5


def test_select_minimizes_cv_error_over_grid():
    ds = smooth_dataset(n=40)
    grid = [0.001, 0.01, 0.1, 1.0]
    sel = select_hyperparameters(ds, nugget_grid=grid, folds=4, cv_seed=1)
    # exhaustive check: re-evaluate every candidate pair from the table
    medians = {row["nugget"]: cross_validate(ds, 4, row["length_scale"], row["nugget"],
                                             shuffle_seed=1).pooled_median
               for row in sel.table}
    assert sel.nugget == min(medians, key=medians.get)
    assert sel.cv_report.pooled_median == pytest.approx(min(medians.values()))


def test_select_rejects_bad_grid():
    ds = smooth_dataset(n=20)
    with pytest.raises(ValueError):
        select_hyperparameters(ds, nugget_grid=[])
    with pytest.raises(ValueError):
        select_hyperparameters(ds, nugget_grid=[1e-5])


def test_model_save_load_roundtrip(tmp_path):
    ds = smooth_dataset(n=20)
    model = fit(ds, length_scale=0.45, nugget=0.02)
    path = tmp_path / "gp.model"
    save_model(model, path)
    loaded = load_model(path)
    rng = np.random.default_rng(5)
    pts = rng.random((7, 4))
    np.testing.assert_array_equal(predict_batch(loaded, pts), predict_batch(model, pts))
    assert loaded.length_scale == model.length_scale
    assert loaded.nugget == model.nugget
