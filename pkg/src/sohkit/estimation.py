"""Capacity-fade estimators: linear regression and ARMAX, plus scenario evaluation."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import ConfigError, FitError, SchemaError
from .preprocessing import FeatureMatrix

RANK_TOL = 1e-10


@dataclass(frozen=True)
class ArmaxParams:
    orders: tuple          # (n_AR, n_X, n_MA)
    a: np.ndarray          # lagged-output coefficients, length n_AR
    b: np.ndarray          # input coefficients, shape (n_X + 1, n_features)
    c: np.ndarray          # lagged-residual coefficients, length n_MA


@dataclass
class RegressionModel:
    """Fitted capacity estimator.

    For the LRM, ``beta`` holds one weight per predictor. For ARMAX the model
    is y(t) = beta0 + sum_d a_d y(t-d) + sum_{d=0..n_X} b_d . u(t-d)
    + sum_d c_d eps(t-d) + eps(t); ``beta`` mirrors the lag-0 input
    coefficients b_0 and ``armax`` carries the full polynomials. Orders
    (0,0,0) reduce exactly to the LRM.
    """

    kind: str                       # "LRM" or "ARMAX"
    features: tuple
    beta0: float
    beta: np.ndarray
    armax: ArmaxParams | None = None
    trained_on: tuple = ()
    scenario: str | None = None
    target: str = "Q"

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if len(self.beta) != len(self.features):
            raise FitError("beta length does not match predictor count")
        if self.kind == "ARMAX":
            p = self.armax
            n_ar, n_x, n_ma = p.orders
            if len(p.a) != n_ar or p.b.shape != (n_x + 1, len(self.features)) or len(p.c) != n_ma:
                raise FitError("ARMAX polynomial lengths do not match declared orders")


def _design(X: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(len(X)), X])


def _check_rank(design: np.ndarray, names) -> None:
    _, r, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    scale = diag[0] if diag.size and diag[0] > 0 else 1.0
    bad = [int(piv[k]) for k in range(len(diag)) if diag[k] < RANK_TOL * scale]
    bad += [int(p) for p in piv[len(diag):]]
    if bad:
        cols = ["intercept" if j == 0 else names[j - 1] for j in sorted(bad)]
        raise FitError(f"design matrix is rank deficient; collinear columns: {', '.join(cols)}")


def fit_lrm(train: FeatureMatrix, target: str = "Q") -> RegressionModel:
    """Ordinary least squares of the target on [1 | features]."""
    y = train.target(target)
    X = _design(train.X)
    if len(y) < X.shape[1]:
        raise FitError(f"need at least {X.shape[1]} rows, got {len(y)}")
    _check_rank(X, train.feature_names)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return RegressionModel("LRM", tuple(train.feature_names), float(coef[0]), coef[1:],
                           trained_on=(train.cell_id,), target=target)


def _armax_design(y, U, eps, orders):
    n_ar, n_x, n_ma = orders
    t0 = max(n_ar, n_x, n_ma)
    n = len(y)
    cols = [np.ones(n - t0)]
    for d in range(1, n_ar + 1):
        cols.append(y[t0 - d:n - d])
    for d in range(0, n_x + 1):
        cols.append(U[t0 - d:n - d])
    for d in range(1, n_ma + 1):
        cols.append(eps[t0 - d:n - d])
    blocks = [c if c.ndim == 2 else c[:, None] for c in cols]
    return np.hstack(blocks), y[t0:], t0


def _long_ar_innovations(y, U, n_x, n):
    """Hannan-Rissanen first stage: residuals of a long-AR(X) regression."""
    p = min(max(10, n // 20), max(2, n // 4))
    if n <= p + p + 2:
        return np.zeros(n)
    D, yy, t0 = _armax_design(y, U, np.zeros(n), (p, n_x, 0))
    theta, *_ = np.linalg.lstsq(D, yy, rcond=None)
    resid = yy - D @ theta
    return np.concatenate([np.zeros(t0), resid])


def _armax_unpack(theta, orders, n_feat):
    n_ar, n_x, n_ma = orders
    beta0 = float(theta[0])
    k = 1
    a = theta[k:k + n_ar]
    k += n_ar
    b = theta[k:k + (n_x + 1) * n_feat].reshape(n_x + 1, n_feat)
    k += (n_x + 1) * n_feat
    c = theta[k:k + n_ma]
    return beta0, a, b, c


def fit_armax(train: FeatureMatrix, orders, target: str = "Q",
              max_iter: int = 200, tol: float = 1e-8) -> RegressionModel:
    """ARMAX fit by iterative pseudo-linear regression.

    The innovation sequence is initialized from a long-AR auxiliary
    regression (Hannan-Rissanen first stage), then the target is regressed
    on lagged outputs, inputs, and lagged residuals, re-estimating the
    residuals after each pass until the coefficients move by less than
    ``tol`` or ``max_iter`` passes. Orders (0,0,0) take the plain OLS path
    and match fit_lrm exactly.
    """
    n_ar, n_x, n_ma = (int(o) for o in orders)
    if min(n_ar, n_x, n_ma) < 0:
        raise ConfigError(f"negative ARMAX order in {orders}")
    y = train.target(target)
    U = train.X
    n_feat = U.shape[1]
    t0 = max(n_ar, n_x, n_ma)
    n_params = 1 + n_ar + (n_x + 1) * n_feat + n_ma
    if len(y) < t0 + n_params:
        raise FitError(f"need at least {t0 + n_params} rows for orders {orders}, got {len(y)}")

    if n_ma > 0:
        eps = _long_ar_innovations(y, U, n_x, len(y))
    else:
        eps = np.zeros(len(y))
    theta = None
    trace = []
    for _ in range(max_iter):
        D, yy, _ = _armax_design(y, U, eps, (n_ar, n_x, n_ma))
        new_theta, *_ = np.linalg.lstsq(D, yy, rcond=None)
        delta = np.inf if theta is None else float(np.max(np.abs(new_theta - theta)))
        trace.append(delta)
        theta = new_theta
        resid = yy - D @ theta
        eps = np.concatenate([np.zeros(len(y) - len(resid)), resid])
        if n_ma == 0 or delta < tol:
            break
    else:
        raise FitError(f"ARMAX{tuple(orders)} did not converge in {max_iter} iterations; "
                       f"last coefficient deltas: {['%.3g' % d for d in trace[-5:]]}")

    beta0, a, b, c = _armax_unpack(theta, (n_ar, n_x, n_ma), n_feat)
    params = ArmaxParams((n_ar, n_x, n_ma), a, b, c)
    kind = "ARMAX"
    return RegressionModel(kind, tuple(train.feature_names), beta0, b[0].copy(), params,
                           trained_on=(train.cell_id,), target=target)


def predict(model: RegressionModel, features: FeatureMatrix) -> np.ndarray:
    """Estimate the target series for a feature matrix.

    LRM: beta0 + X beta per row. ARMAX: free-running recursion seeded with
    the cell's first observed target (beginning-of-life capacity is known in
    deployment) and zero residual feedback at inference.
    """
    if tuple(features.feature_names) != tuple(model.features):
        raise SchemaError(f"feature columns {features.feature_names} do not match "
                          f"model features {model.features}")
    U = features.X
    if model.kind == "LRM" or model.armax is None:
        return model.beta0 + U @ model.beta
    n_ar, n_x, _ = model.armax.orders
    a, b = model.armax.a, model.armax.b
    y_obs = features.target(model.target)
    n = len(U)
    yhat = np.empty(n)
    y0 = float(y_obs[0])
    yhat[0] = y0
    for t in range(1, n):
        acc = model.beta0
        for d in range(1, n_ar + 1):
            acc += a[d - 1] * (yhat[t - d] if t - d >= 0 else y0)
        for d in range(0, n_x + 1):
            acc += float(b[d] @ U[max(t - d, 0)])
        yhat[t] = acc
    return yhat


def predict_one_step(model: RegressionModel, features: FeatureMatrix) -> np.ndarray:
    """One-step-ahead predictions with residual feedback from observed targets.

    Lagged outputs come from the observed series and the moving-average terms
    feed back the running one-step residuals, so MA orders actually influence
    the result; grid search validates on this quantity. The first
    max(n_AR, n_X, n_MA) samples have no full regressor window and pass
    through as observed (zero residual).
    """
    if tuple(features.feature_names) != tuple(model.features):
        raise SchemaError("feature columns do not match model features")
    U = features.X
    y = features.target(model.target)
    if model.kind == "LRM" or model.armax is None:
        return model.beta0 + U @ model.beta
    n_ar, n_x, n_ma = model.armax.orders
    a, b, c = model.armax.a, model.armax.b, model.armax.c
    n = len(U)
    t0 = max(n_ar, n_x, n_ma)
    yhat = np.empty(n)
    eps = np.zeros(n)
    yhat[:t0] = y[:t0]
    for t in range(t0, n):
        acc = model.beta0
        for d in range(1, n_ar + 1):
            acc += a[d - 1] * y[t - d]
        for d in range(0, n_x + 1):
            acc += float(b[d] @ U[t - d])
        for d in range(1, n_ma + 1):
            acc += c[d - 1] * eps[t - d]
        yhat[t] = acc
        eps[t] = y[t] - acc
    return yhat


@dataclass
class EvaluationReport:
    """Relative-error summary for one test cell (errors in percent)."""

    cell_id: str
    cycles: np.ndarray
    q_true: np.ndarray
    q_est: np.ndarray
    residuals: np.ndarray        # e_i = (true - est) / true
    rmse_pct: float
    ape_pct: np.ndarray
    max_ape_pct: float


def evaluate(actual: np.ndarray, estimated: np.ndarray, cell_id: str = "",
             cycles=None) -> EvaluationReport:
    """Relative residuals e = (actual - estimated) / actual, RMSE and APE in percent."""
    actual = np.asarray(actual, dtype=np.float64)
    estimated = np.asarray(estimated, dtype=np.float64)
    if actual.shape != estimated.shape:
        raise ValueError("evaluate needs aligned series")
    if np.any(actual == 0):
        raise ValueError("actual capacity contains zeros")
    e = (actual - estimated) / actual
    ape = np.abs(e) * 100.0
    rmse = float(np.sqrt(np.mean((e * 100.0) ** 2)))
    if cycles is None:
        cycles = np.arange(1, len(actual) + 1)
    return EvaluationReport(cell_id, np.asarray(cycles, dtype=np.int64), actual, estimated,
                            e, rmse, ape, float(np.max(ape)) if len(ape) else 0.0)


@dataclass(frozen=True)
class GridPoint:
    orders: tuple
    rmse_pct: float     # nan when the fit failed
    failed: bool


def grid_search_armax(train: FeatureMatrix, validate: FeatureMatrix,
                      grid=None, target: str = "Q", tie_rel_tol: float = 0.01):
    """Exhaustive ARMAX order selection by one-step validation RMSE.

    Default grid is (0..3)^3, 64 points. Validation uses one-step-ahead
    predictions so the MA orders are actually exercised. Failed fits are
    marked and skipped. Candidates within ``tie_rel_tol`` relative of the
    best RMSE count as tied (they differ only by sampling noise); ties break
    toward the smaller total order, then lexicographically. Returns
    (best_orders, [GridPoint...]).
    """
    if grid is None:
        grid = list(itertools.product(range(4), repeat=3))
    grid = [tuple(int(o) for o in g) for g in grid]
    if not grid:
        raise ConfigError("empty ARMAX grid")
    # score every candidate on the same samples: skip the longest
    # initialization window any grid point needs
    burn = max(max(g) for g in grid)
    points = []
    for orders in grid:
        try:
            model = fit_armax(train, orders, target=target)
            yhat = predict_one_step(model, validate)[burn:]
            y = validate.target(target)[burn:]
            if target == "Q":
                rmse = evaluate(y, yhat).rmse_pct
            else:
                rmse = float(np.sqrt(np.mean((y - yhat) ** 2)))
            points.append(GridPoint(orders, rmse, False))
        except (FitError, ValueError, np.linalg.LinAlgError):
            points.append(GridPoint(orders, float("nan"), True))
    ok = [p for p in points if not p.failed]
    if not ok:
        raise FitError("every ARMAX grid point failed to fit")
    floor = min(p.rmse_pct for p in ok)
    tied = [p for p in ok if p.rmse_pct <= floor * (1.0 + tie_rel_tol)]
    best = min(tied, key=lambda p: (sum(p.orders), p.orders))
    return best.orders, points


def _stack_matrices(mats) -> FeatureMatrix:
    names = mats[0].feature_names
    for m in mats[1:]:
        if m.feature_names != names:
            raise SchemaError("cannot stack matrices with different feature sets")
    return FeatureMatrix(
        cell_id="+".join(m.cell_id for m in mats),
        cycles=np.concatenate([m.cycles for m in mats]),
        feature_names=names,
        X=np.vstack([m.X for m in mats]),
        q_Ah=np.concatenate([m.q_Ah for m in mats]),
        q_loss_pct=np.concatenate([m.q_loss_pct for m in mats]),
    )


def parse_scenario(text: str):
    """Parse a scenario flag: 'single:<cell>' or 'loo'."""
    if text == "loo":
        return ("leave_one_out", None)
    if text.startswith("single:"):
        cell = text.split(":", 1)[1]
        if not cell:
            raise ConfigError("single-train scenario needs a cell id, e.g. single:W8")
        return ("single_train", cell)
    raise ConfigError(f"unknown scenario {text!r}; expected 'single:<cell>' or 'loo'")


def run_scenario(matrices: dict, scenario: str, model_kind: str = "lrm",
                 armax_orders=(1, 0, 2), target: str = "Q"):
    """Train/evaluate across cells per the two training scenarios.

    Scenario "single:<cell>" trains once on that cell and evaluates on every
    other cell; "loo" trains per test cell on all remaining cells. Feature
    sets are intersected across the cells involved in each fit so blocked
    features drop out. Returns ``(models, reports)`` keyed by test cell.
    A test cell's rows never enter its own training set.
    """
    kind, train_cell = parse_scenario(scenario)
    if len(matrices) < 2:
        raise ConfigError("scenarios need at least 2 cells")
    if kind == "single_train" and train_cell not in matrices:
        raise ConfigError(f"training cell {train_cell!r} not in campaign "
                          f"({sorted(matrices)})")

    def restrict(m: FeatureMatrix, names) -> FeatureMatrix:
        idx = [m.feature_names.index(n) for n in names]
        return FeatureMatrix(m.cell_id, m.cycles, tuple(names), m.X[:, idx],
                             m.q_Ah, m.q_loss_pct)

    models, reports = {}, {}
    for test_cell, test_m in sorted(matrices.items()):
        if kind == "single_train":
            if test_cell == train_cell:
                continue
            train_cells = [train_cell]
        else:
            train_cells = [c for c in sorted(matrices) if c != test_cell]
        assert test_cell not in train_cells
        common = [n for n in matrices[train_cells[0]].feature_names
                  if all(n in matrices[c].feature_names for c in train_cells)
                  and n in test_m.feature_names]
        if not common:
            raise ConfigError(f"no common features between {train_cells} and {test_cell}")
        train_m = _stack_matrices([restrict(matrices[c], common) for c in train_cells])
        test_r = restrict(test_m, common)
        if model_kind == "lrm":
            model = fit_lrm(train_m, target=target)
        elif model_kind == "armax":
            model = fit_armax(train_m, armax_orders, target=target)
        else:
            raise ConfigError(f"unknown model kind {model_kind!r}")
        model.trained_on = tuple(train_cells)
        model.scenario = scenario
        yhat = predict(model, test_r)
        if target == "Q":
            reports[test_cell] = evaluate(test_r.q_Ah, yhat, test_cell, test_r.cycles)
        else:
            q_fresh = test_r.q_Ah[0] / (1 - test_r.q_loss_pct[0] / 100.0)
            q_est = q_fresh * (1 - yhat / 100.0)
            reports[test_cell] = evaluate(test_r.q_Ah, q_est, test_cell, test_r.cycles)
        models[test_cell] = model
    return models, reports


def model_to_json(model: RegressionModel) -> dict:
    """Serializable form; the ARMAX b matrix is flattened row-major
    (lag-major), its shape implied by the orders and feature count."""
    obj = {
        "kind": model.kind,
        "features": list(model.features),
        "beta0": model.beta0,
        "beta": [float(b) for b in model.beta],
        "armax": None,
        "trained_on": list(model.trained_on),
        "scenario": model.scenario,
        "target": model.target,
    }
    if model.armax is not None:
        p = model.armax
        obj["armax"] = {
            "orders": list(p.orders),
            "a": [float(v) for v in p.a],
            "b": [float(v) for v in p.b.ravel()],
            "c": [float(v) for v in p.c],
        }
    return obj


def model_from_json(obj: dict) -> RegressionModel:
    try:
        armax = None
        features = tuple(obj["features"])
        if obj.get("armax") is not None:
            raw = obj["armax"]
            orders = tuple(int(o) for o in raw["orders"])
            b = np.asarray(raw["b"], dtype=np.float64).reshape(orders[1] + 1, len(features))
            armax = ArmaxParams(orders, np.asarray(raw["a"], dtype=np.float64), b,
                                np.asarray(raw["c"], dtype=np.float64))
        return RegressionModel(
            kind=obj["kind"], features=features, beta0=float(obj["beta0"]),
            beta=np.asarray(obj["beta"], dtype=np.float64), armax=armax,
            trained_on=tuple(obj.get("trained_on", ())),
            scenario=obj.get("scenario"), target=obj.get("target", "Q"),
        )
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed model JSON: {exc}") from None


def save_model(path, model: RegressionModel) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(model_to_json(model), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path) -> RegressionModel:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_json(json.load(fh))
