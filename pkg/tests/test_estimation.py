import numpy as np
import pytest

from sohkit.core import ConfigError, FitError, SchemaError
from sohkit.estimation import (evaluate, fit_armax, fit_lrm, grid_search_armax,
                               load_model, model_from_json, predict,
                               predict_one_step, run_scenario, save_model)
from sohkit.preprocessing import FeatureMatrix


def solve_normal_equations(X, y):
    """Independent oracle: Gaussian elimination on X^T X b = X^T y."""
    Xb = np.column_stack([np.ones(len(X)), X])
    A = (Xb.T @ Xb).tolist()
    b = (Xb.T @ y).tolist()
    n = len(b)
    for k in range(n):
        piv = max(range(k, n), key=lambda r: abs(A[r][k]))
        A[k], A[piv] = A[piv], A[k]
        b[k], b[piv] = b[piv], b[k]
        for r in range(k + 1, n):
            f = A[r][k] / A[k][k]
            for c in range(k, n):
                A[r][c] -= f * A[k][c]
            b[r] -= f * b[k]
    out = [0.0] * n
    for k in range(n - 1, -1, -1):
        out[k] = (b[k] - sum(A[k][c] * out[c] for c in range(k + 1, n))) / A[k][k]
    return np.asarray(out)


def matrix(X, y, cell="T", names=None):
    X = np.atleast_2d(np.asarray(X, float))
    if X.shape[0] != len(y):
        X = X.T
    if names is None:
        names = tuple(f"f{k}" for k in range(X.shape[1]))
    return FeatureMatrix(cell, np.arange(1, len(y) + 1), names, X,
                         np.asarray(y, float), np.zeros(len(y)))


class TestFitLrm:
    def test_exact_line(self):
        u = np.linspace(0, 9, 10)
        y = 3.0 + 2.0 * u
        m = fit_lrm(matrix(u, y))
        assert m.beta0 == pytest.approx(3.0, abs=1e-12)
        assert m.beta[0] == pytest.approx(2.0, abs=1e-12)
        resid = y - predict(m, matrix(u, y))
        assert np.sqrt(np.mean(resid ** 2)) < 1e-12

    def test_duplicated_predictor_names_columns(self):
        u = np.linspace(0, 9, 10)
        X = np.column_stack([u, u])
        with pytest.raises(FitError, match="f0.*f1|f1.*f0|collinear"):
            fit_lrm(matrix(X, 2 * u, names=("f0", "f1")))

    def test_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(5):
            n, p = int(rng.integers(20, 200)), int(rng.integers(1, 6))
            X = rng.normal(0, 2, (n, p))
            y = rng.normal(0, 1, n) + X @ rng.normal(0, 1, p) + 4.0
            m = fit_lrm(matrix(X, y))
            ref = solve_normal_equations(X, y)
            got = np.concatenate([[m.beta0], m.beta])
            assert np.allclose(got, ref, rtol=1e-9, atol=1e-9)

    def test_residual_orthogonal_to_design(self):
        rng = np.random.default_rng(11)
        X = rng.normal(0, 1, (60, 3))
        y = X @ np.array([1.0, -2.0, 0.5]) + rng.normal(0, 0.3, 60)
        m = fit_lrm(matrix(X, y))
        e = y - predict(m, matrix(X, y))
        Xb = np.column_stack([np.ones(60), X])
        bound = 1e-8 * np.linalg.norm(Xb) * max(np.linalg.norm(e), 1e-30)
        assert np.all(np.abs(Xb.T @ e) < max(bound, 1e-10))

    def test_training_rmse_beats_random_perturbations(self):
        rng = np.random.default_rng(12)
        X = rng.normal(0, 1, (80, 2))
        y = 1.0 + X @ np.array([0.7, -1.1]) + rng.normal(0, 0.2, 80)
        m = fit_lrm(matrix(X, y))
        base = np.mean((y - predict(m, matrix(X, y))) ** 2)
        coef = np.concatenate([[m.beta0], m.beta])
        Xb = np.column_stack([np.ones(80), X])
        for _ in range(100):
            other = coef + rng.normal(0, 0.05, 3)
            assert np.mean((y - Xb @ other) ** 2) >= base

    def test_too_few_rows(self):
        with pytest.raises(FitError):
            fit_lrm(matrix(np.arange(1.0), np.arange(1.0)))


class TestPredict:
    def test_affine(self):
        m = fit_lrm(matrix(np.arange(10.0), 3.0 + 2.0 * np.arange(10.0)))
        out = predict(m, matrix([5.0], [0.0]))
        assert out[0] == pytest.approx(13.0, rel=1e-12)

    def test_zero_weights_constant(self):
        u = np.linspace(0, 9, 10)
        m = fit_lrm(matrix(u, np.full(10, 4.2)))
        assert np.allclose(predict(m, matrix(u, u)), 4.2, atol=1e-12)

    def test_feature_mismatch_rejected(self):
        m = fit_lrm(matrix(np.arange(10.0), np.arange(10.0), names=("a",)))
        with pytest.raises(SchemaError):
            predict(m, matrix(np.arange(5.0), np.arange(5.0), names=("b",)))


def gen_armax(n, beta0, a1, b0, c, sigma, rng):
    u = rng.normal(0.0, 0.3, (n, 2))
    e = rng.normal(0.0, sigma, n) if sigma > 0 else np.zeros(n)
    y = np.empty(n)
    y[0] = beta0 / (1 - a1) + b0 @ u[0] + e[0]
    y[1] = beta0 + a1 * y[0] + b0 @ u[1] + e[1] + c[0] * e[0]
    for t in range(2, n):
        y[t] = beta0 + a1 * y[t - 1] + b0 @ u[t] + e[t] + c[0] * e[t - 1] + c[1] * e[t - 2]
    return u, y


TRUE = dict(beta0=2.0, a1=0.6, b0=np.array([0.4, -0.25]), c=np.array([0.5, 0.3]))


class TestFitArmax:
    def test_zero_orders_reduce_to_lrm_exactly(self):
        rng = np.random.default_rng(13)
        X = rng.normal(0, 1, (40, 2))
        y = 2.0 + X @ np.array([1.0, -0.5]) + rng.normal(0, 0.1, 40)
        m_armax = fit_armax(matrix(X, y), (0, 0, 0))
        m_lrm = fit_lrm(matrix(X, y))
        assert m_armax.beta0 == m_lrm.beta0
        assert np.array_equal(m_armax.beta, m_lrm.beta)

    def test_noise_free_recovery(self):
        rng = np.random.default_rng(14)
        u, y = gen_armax(200, TRUE["beta0"], TRUE["a1"], TRUE["b0"], TRUE["c"], 0.0, rng)
        m = fit_armax(matrix(u, y), (1, 0, 2))
        # with zero innovations only the intercept, AR, and input coefficients
        # are identifiable; the MA part multiplies an all-zero sequence
        assert m.beta0 == pytest.approx(TRUE["beta0"], abs=1e-6)
        assert m.armax.a[0] == pytest.approx(TRUE["a1"], abs=1e-6)
        assert np.allclose(m.armax.b[0], TRUE["b0"], atol=1e-6)

    def test_free_run_prediction_matches_recursion(self):
        rng = np.random.default_rng(15)
        u, y = gen_armax(60, TRUE["beta0"], TRUE["a1"], TRUE["b0"], TRUE["c"], 0.0, rng)
        m = fit_armax(matrix(u, y), (1, 0, 2))
        yhat = predict(m, matrix(u, y))
        assert np.allclose(yhat, y, atol=1e-9)

    def test_one_step_prediction_uses_observed_lags(self):
        rng = np.random.default_rng(16)
        u, y = gen_armax(300, TRUE["beta0"], TRUE["a1"], TRUE["b0"], TRUE["c"], 1e-3, rng)
        m = fit_armax(matrix(u, y), (1, 0, 2))
        yhat = predict_one_step(m, matrix(u, y))
        # one-step residuals should be on the innovation scale
        assert np.std(y[5:] - yhat[5:]) < 5e-3

    def test_too_few_rows(self):
        with pytest.raises(FitError):
            fit_armax(matrix(np.arange(4.0), np.arange(4.0)), (1, 0, 2))

    def test_negative_order_rejected(self):
        with pytest.raises(ConfigError):
            fit_armax(matrix(np.arange(30.0), np.arange(30.0)), (-1, 0, 0))


class TestGridSearch:
    def test_singleton_grid(self):
        rng = np.random.default_rng(17)
        u, y = gen_armax(100, TRUE["beta0"], TRUE["a1"], TRUE["b0"], TRUE["c"], 1e-3, rng)
        best, points = grid_search_armax(matrix(u, y), matrix(u, y), grid=[(0, 0, 0)])
        assert best == (0, 0, 0) and len(points) == 1

    def test_default_grid_is_64_points(self):
        rng = np.random.default_rng(18)
        u, y = gen_armax(400, TRUE["beta0"], TRUE["a1"], TRUE["b0"], TRUE["c"], 1e-3, rng)
        u2, y2 = gen_armax(400, TRUE["beta0"], TRUE["a1"], TRUE["b0"], TRUE["c"], 1e-3, rng)
        best, points = grid_search_armax(matrix(u, y), matrix(u2, y2))
        assert len(points) == 64
        assert {p.orders for p in points} == {(a, b, c) for a in range(4)
                                              for b in range(4) for c in range(4)}

    def test_planted_orders_selected(self):
        rng = np.random.default_rng(0)
        u, y = gen_armax(800, TRUE["beta0"], TRUE["a1"], TRUE["b0"], TRUE["c"], 1e-4, rng)
        u2, y2 = gen_armax(2000, TRUE["beta0"], TRUE["a1"], TRUE["b0"], TRUE["c"], 1e-4, rng)
        best, _ = grid_search_armax(matrix(u, y), matrix(u2, y2))
        assert best == (1, 0, 2)

    def test_empty_grid_rejected(self):
        with pytest.raises(ConfigError):
            grid_search_armax(matrix(np.arange(30.0), np.arange(30.0)),
                              matrix(np.arange(30.0), np.arange(30.0)), grid=[])


class TestEvaluate:
    def test_identity(self):
        rep = evaluate(np.array([4.8, 4.7]), np.array([4.8, 4.7]))
        assert rep.rmse_pct == 0.0 and rep.max_ape_pct == 0.0

    def test_single_point_ape(self):
        rep = evaluate(np.array([5.0]), np.array([4.9]))
        assert rep.ape_pct[0] == pytest.approx(2.0, rel=1e-12)

    def test_hand_computed_rmse(self):
        actual = np.array([1.0, 1.0, 1.0, 1.0])
        resid = np.array([0.01, -0.02, 0.005, 0.015])
        rep = evaluate(actual, actual * (1 - resid))
        expected = 100.0 * np.sqrt(np.mean(resid ** 2))
        assert rep.rmse_pct == pytest.approx(expected, rel=1e-12)
        assert rep.max_ape_pct == pytest.approx(2.0, rel=1e-12)

    def test_max_ape_dominates_rmse(self):
        rng = np.random.default_rng(19)
        for _ in range(20):
            actual = rng.uniform(3, 5, 30)
            est = actual * (1 + rng.normal(0, 0.01, 30))
            rep = evaluate(actual, est)
            assert rep.max_ape_pct >= rep.rmse_pct >= 0.0

    def test_zero_actual_rejected(self):
        with pytest.raises(ValueError):
            evaluate(np.array([0.0, 1.0]), np.array([0.0, 1.0]))


def make_cells(n_cells=3, n=30, seed=20, slope=2.0):
    rng = np.random.default_rng(seed)
    cells = {}
    for k in range(n_cells):
        loss = np.linspace(0, 12, n)
        q = 4.85 * (1 - loss / 100)
        x1 = slope * (q - q[0]) + rng.normal(0, 1e-4, n)
        x2 = -1.3 * (q - q[0]) + rng.normal(0, 1e-4, n)
        cells[f"C{k}"] = FeatureMatrix(f"C{k}", np.arange(1, n + 1), ("dE_ch", "dE_dis"),
                                       np.column_stack([x1, x2]), q, loss)
    return cells


class TestRunScenario:
    def test_leave_one_out_structure(self):
        cells = make_cells(2)
        models, reports = run_scenario(cells, "loo")
        assert set(models) == {"C0", "C1"}
        assert models["C0"].trained_on == ("C1",)
        assert models["C1"].trained_on == ("C0",)

    def test_single_train_structure(self):
        cells = make_cells(5)
        models, reports = run_scenario(cells, "single:C0")
        assert set(reports) == {"C1", "C2", "C3", "C4"}
        assert all(m.trained_on == ("C0",) for m in models.values())

    def test_test_cell_never_in_training(self):
        cells = make_cells(4)
        models, _ = run_scenario(cells, "loo")
        for cell, model in models.items():
            assert cell not in model.trained_on

    def test_missing_train_cell_rejected(self):
        with pytest.raises(ConfigError):
            run_scenario(make_cells(3), "single:NOPE")

    def test_needs_two_cells(self):
        with pytest.raises(ConfigError):
            run_scenario(make_cells(1), "loo")

    def test_near_perfect_recovery_on_linear_cells(self):
        cells = make_cells(3)
        _, reports = run_scenario(cells, "loo")
        for rep in reports.values():
            assert rep.max_ape_pct < 0.1

    def test_bad_scenario_string(self):
        with pytest.raises(ConfigError):
            run_scenario(make_cells(2), "all")

    def test_capacity_loss_target(self):
        # regressing on loss percent converts back to Ah for evaluation
        cells = make_cells(3)
        _, reports = run_scenario(cells, "loo", target="Q_loss")
        for rep in reports.values():
            assert rep.max_ape_pct < 0.2
            assert np.all(rep.q_true > 0)


class TestModelJson:
    def test_lrm_roundtrip(self, tmp_path):
        m = fit_lrm(matrix(np.arange(10.0), 3.0 + 2.0 * np.arange(10.0)))
        p = tmp_path / "model.json"
        save_model(p, m)
        back = load_model(p)
        assert back.kind == "LRM" and back.beta0 == m.beta0
        assert np.array_equal(back.beta, m.beta)

    def test_armax_roundtrip(self, tmp_path):
        rng = np.random.default_rng(21)
        u, y = gen_armax(100, TRUE["beta0"], TRUE["a1"], TRUE["b0"], TRUE["c"], 1e-3, rng)
        m = fit_armax(matrix(u, y), (1, 0, 2))
        p = tmp_path / "model.json"
        save_model(p, m)
        back = load_model(p)
        assert back.armax.orders == (1, 0, 2)
        assert np.array_equal(back.armax.a, m.armax.a)
        assert np.array_equal(back.armax.b, m.armax.b)
        assert np.array_equal(back.armax.c, m.armax.c)

    def test_malformed_json_rejected(self):
        with pytest.raises(SchemaError):
            model_from_json({"kind": "LRM"})
