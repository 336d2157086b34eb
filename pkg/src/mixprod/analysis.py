"""Post-estimation analytics.

Classification of firms into latent types, the decomposition of the
gap between pooled and type-specific productivity-growth measures,
investment regressions (OLS and quantile), and cross-plant dispersion
diagnostics of input shares.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import MixtureModel
from .panel import PanelData

__all__ = [
    "BiasReport",
    "InvestmentRegressionResult",
    "classify",
    "productivity_growth_bias",
    "investment_regression",
    "quantile_regression",
    "share_dispersion",
    "residualized_dispersion",
    "nearest_rank_percentile",
    "RankDeficiencyError",
]

QUANTILE_TAUS = (0.10, 0.25, 0.50, 0.75, 0.90)


class RankDeficiencyError(ValueError):
    """Raised when a regressor matrix is numerically rank deficient."""


@dataclass
class BiasReport:
    """Per-type summary of the productivity-growth measurement gap.

    ``mean_abs_bias_ratio`` is mean |Bias| / mean |pooled growth| in
    the type group; ``mean_bias_ratio_pos_growth`` conditions the
    numerator mean on positive type-specific growth. ``n_skipped``
    counts firms with fewer than two usable periods.
    """

    mean_abs_bias_ratio: dict
    mean_bias_ratio_pos_growth: dict
    beta_m: dict
    n_skipped: int
    growth_pooled: np.ndarray = None     # (n, T-1)
    growth_typed: np.ndarray = None      # (n, T-1)
    bias: np.ndarray = None              # (n, T-1)

    def to_rows(self) -> list:
        rows = []
        for j in sorted(self.mean_abs_bias_ratio):
            rows.append((f"type{j + 1}", "mean_abs_bias_ratio",
                         self.mean_abs_bias_ratio[j], ""))
            rows.append((f"type{j + 1}", "mean_bias_ratio_pos_growth",
                         self.mean_bias_ratio_pos_growth[j], ""))
            rows.append((f"type{j + 1}", "beta_m", self.beta_m[j], ""))
        return rows


@dataclass
class InvestmentRegressionResult:
    """OLS and quantile coefficients on productivity, with SEs."""

    alpha_omega_ols: float
    alpha_omega_ols_se: float
    alpha_omega_quantiles: dict          # tau -> (coef, se)
    coefficients_ols: np.ndarray = None
    column_names: tuple = ()

    def to_rows(self, group: str = "all") -> list:
        rows = [(group, "alpha_omega_ols", self.alpha_omega_ols,
                 self.alpha_omega_ols_se)]
        for tau in sorted(self.alpha_omega_quantiles):
            coef, se = self.alpha_omega_quantiles[tau]
            rows.append((group, f"alpha_omega_q{tau:.2f}", coef, se))
        return rows


# ---------------------------------------------------------------------------
# classification

def classify(posterior) -> np.ndarray:
    """Hard type assignment by per-firm posterior argmax.

    Ties break to the lowest type index. Invariant to any strictly
    monotone transform applied uniformly within a row.
    """
    post = np.asarray(posterior, dtype=float)
    if post.ndim != 2:
        raise ValueError("posterior must be (n_firms, J)")
    if np.any(np.abs(post.sum(axis=1) - 1.0) > 1e-8):
        raise ValueError("posterior rows must sum to 1")
    return post.argmax(axis=1)


# ---------------------------------------------------------------------------
# productivity-growth measurement gap

def _growth_terms(panel: PanelData, model: MixtureModel, j: int):
    """Composite-intercept growth, input growths, and residual growth
    under type ``j`` of ``model``; all (n, T-1)."""
    tp = model.types[j]
    dbt = np.diff(model.beta_t(j))[None, :]
    dm = np.diff(panel.m, axis=1)
    dl = np.diff(panel.ltilde, axis=1)
    dk = np.diff(panel.k, axis=1)
    # flexible-input residual recovered from the intermediate share
    eps = -panel.sm + np.log(tp.beta_m) + 0.5 * tp.sigma_eps**2
    deps = np.diff(eps, axis=1)
    return dbt, dm, dl, dk, deps


def _measured_growth(panel, model, j):
    tp = model.types[j]
    dbt, dm, dl, dk, deps = _growth_terms(panel, model, j)
    dy = np.diff(panel.y, axis=1)
    return dy - (dbt + tp.beta_m * dm + tp.beta_l * dl
                 + tp.beta_k * dk + deps)


def productivity_growth_bias(panel: PanelData, typed_model: MixtureModel,
                             pooled_model: MixtureModel,
                             assignment) -> BiasReport:
    """Decompose pooled-minus-typed measured productivity growth.

    Treating ``typed_model`` as true, the pooled (one-type) growth
    measure equals the type-specific one plus a bias term that collects
    the elasticity gaps times input growth, the residual-growth gap,
    and the composite-intercept growth gap:

        growth_pooled = growth_typed + Bias,
        Bias = (beta_m^j - beta_m_pooled) dm
             + (beta_l^j - beta_l_pooled) dl
             + (beta_k^j - beta_k_pooled) dk
             + (deps^j - deps_pooled) + (dbeta_t^j - dbeta_t_pooled),

    an exact algebraic identity observation by observation. Summary
    ratios divide by the mean absolute pooled growth within each type
    group; the second statistic conditions on positive type-specific
    growth.
    """
    if pooled_model.J != 1:
        raise ValueError("pooled_model must have exactly one type")
    assignment = np.asarray(assignment, dtype=int)
    if assignment.shape != (panel.n_firms,):
        raise ValueError("assignment must have one entry per firm")
    n, T = panel.n_firms, panel.T
    n_skipped = 0
    if T < 2:
        return BiasReport({}, {}, {}, n_skipped=n)

    growth_pooled = _measured_growth(panel, pooled_model, 0)
    growth_typed = np.empty((n, T - 1))
    bias = np.empty((n, T - 1))
    p_dbt, p_dm, p_dl, p_dk, p_deps = _growth_terms(panel, pooled_model, 0)
    tp0 = pooled_model.types[0]
    for j in range(typed_model.J):
        rows = assignment == j
        if not rows.any():
            continue
        tp = typed_model.types[j]
        growth_typed[rows] = _measured_growth(panel, typed_model, j)[rows]
        dbt, dm, dl, dk, deps = _growth_terms(panel, typed_model, j)
        bias[rows] = (
            (tp.beta_m - tp0.beta_m) * dm[rows]
            + (tp.beta_l - tp0.beta_l) * dl[rows]
            + (tp.beta_k - tp0.beta_k) * dk[rows]
            + (deps - p_deps)[rows]
            + (dbt - p_dbt)
        )

    abs_ratio, pos_ratio, beta_ms = {}, {}, {}
    for j in range(typed_model.J):
        rows = assignment == j
        if not rows.any():
            continue
        denom = float(np.mean(np.abs(growth_pooled[rows])))
        if denom <= 0.0:
            raise ValueError(
                f"type {j}: mean absolute pooled growth is zero"
            )
        abs_ratio[j] = float(np.mean(np.abs(bias[rows]))) / denom
        pos = growth_typed[rows] > 0
        pos_ratio[j] = (
            float(np.mean(bias[rows][pos])) / denom if pos.any() else np.nan
        )
        beta_ms[j] = float(typed_model.types[j].beta_m)
    return BiasReport(
        mean_abs_bias_ratio=abs_ratio,
        mean_bias_ratio_pos_growth=pos_ratio,
        beta_m=beta_ms,
        n_skipped=n_skipped,
        growth_pooled=growth_pooled,
        growth_typed=growth_typed,
        bias=bias,
    )


# ---------------------------------------------------------------------------
# regressions

def _design_matrix(omega_hat, k):
    omega_hat = np.asarray(omega_hat, dtype=float).ravel()
    k = np.asarray(k, dtype=float).ravel()
    X = np.column_stack([np.ones_like(k), omega_hat, k, k * k])
    return X, ("const", "omega", "k", "k_sq")


def _check_rank(X, names):
    svals = np.linalg.svd(X, compute_uv=False)
    if svals[-1] <= 1e-10 * max(svals[0], 1.0):
        # name the column whose removal restores conditioning best
        best, best_s = None, -np.inf
        for c in range(X.shape[1]):
            sub = np.delete(X, c, axis=1)
            s = np.linalg.svd(sub, compute_uv=False)[-1]
            if s > best_s:
                best, best_s = c, s
        raise RankDeficiencyError(
            f"regressor matrix is rank deficient; column "
            f"'{names[best]}' is collinear with the others"
        )


def _ols_sandwich(X, y):
    XtX_inv = np.linalg.inv(X.T @ X)
    coef = XtX_inv @ (X.T @ y)
    resid = y - X @ coef
    meat = (X * resid[:, None]**2).T @ X
    cov = XtX_inv @ meat @ XtX_inv
    return coef, np.sqrt(np.maximum(np.diag(cov), 0.0))


def _check_loss(resid, tau):
    return float(np.sum(resid * (tau - (resid < 0))))


def quantile_regression(X, y, tau, tol=1e-9, max_iter=500):
    """Check-loss minimizer by iteratively reweighted least squares.

    Minimizes sum_i rho_tau(y_i - x_i b) with the smoothed weights
    w_i = |tau - 1{r_i < 0}| / max(|r_i|, eps); falls back to a
    coordinate-wise golden-section search when the iteration stalls.
    Returns (coef, se) with the standard error of each coefficient
    from the order-statistic sparsity estimate (Bofinger bandwidth).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    n, p = X.shape
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    coef = np.linalg.lstsq(X, y, rcond=None)[0]
    eps = 1e-9
    best = coef.copy()
    best_loss = _check_loss(y - X @ coef, tau)
    for _ in range(max_iter):
        r = y - X @ coef
        w = np.abs(tau - (r < 0)) / np.maximum(np.abs(r), eps)
        Xw = X * w[:, None]
        coef_new = np.linalg.solve(Xw.T @ X + 1e-12 * np.eye(p), Xw.T @ y)
        loss = _check_loss(y - X @ coef_new, tau)
        if loss < best_loss - 1e-15:
            best, best_loss = coef_new.copy(), loss
        if np.max(np.abs(coef_new - coef)) < tol * max(
                1.0, np.max(np.abs(coef))):
            coef = coef_new
            break
        coef = coef_new
    coef = best
    # coordinate-wise golden-section polish: robust on tiny problems
    # where IRLS can stall between vertex solutions
    phi = (np.sqrt(5.0) - 1.0) / 2.0
    for _ in range(3):
        improved = False
        for c in range(p):
            xc = X[:, c]
            r0 = y - X @ coef + coef[c] * xc
            span = max(1.0, 10.0 * abs(coef[c]))
            lo, hi = coef[c] - span, coef[c] + span
            for _ in range(200):
                m1 = hi - phi * (hi - lo)
                m2 = lo + phi * (hi - lo)
                if _check_loss(r0 - m1 * xc, tau) <= _check_loss(
                        r0 - m2 * xc, tau):
                    hi = m2
                else:
                    lo = m1
                if hi - lo < 1e-12 * max(1.0, abs(lo)):
                    break
            cand = 0.5 * (lo + hi)
            if _check_loss(r0 - cand * xc, tau) < _check_loss(
                    r0 - coef[c] * xc, tau) - 1e-15:
                coef = coef.copy()
                coef[c] = cand
                improved = True
        if not improved:
            break

    # sparsity (density of the residual at its tau-quantile) by the
    # order-statistic difference at the Bofinger bandwidth
    resid = np.sort(y - X @ coef)
    z = 1.0 / (2.0 * np.sqrt(np.pi)) * np.exp(
        -0.5 * _normal_ppf(tau) ** 2)
    h = n ** (-1.0 / 5.0) * (4.5 * z**4 / (2.0 * _normal_ppf(tau)**2
                                           + 1.0)**2) ** (1.0 / 5.0)
    h = min(max(h, 1.0 / n), min(tau, 1.0 - tau) - 1e-12) if n > 2 else 0.25
    lo_i = int(np.clip(np.floor((tau - h) * (n - 1)), 0, n - 1))
    hi_i = int(np.clip(np.ceil((tau + h) * (n - 1)), 0, n - 1))
    spread = resid[hi_i] - resid[lo_i]
    sparsity = spread / max(2.0 * h, 1e-12) if spread > 0 else np.nan
    XtX_inv = np.linalg.inv(X.T @ X + 1e-12 * np.eye(p))
    cov = tau * (1.0 - tau) * sparsity**2 * XtX_inv * n
    se = np.sqrt(np.maximum(np.diag(cov) / n, 0.0))
    return coef, se


def _normal_ppf(q):
    from scipy.stats import norm
    return float(norm.ppf(q))


def investment_regression(panel: PanelData, omega_hat, investment_ratio,
                          taus=QUANTILE_TAUS) -> InvestmentRegressionResult:
    """Linear investment model with a quadratic capital control.

    Regresses the investment ratio on recovered productivity and
    (k, k^2) plus an intercept; OLS with heteroskedasticity-robust
    standard errors and check-loss quantile fits at each ``taus``.
    """
    X, names = _design_matrix(omega_hat, panel.k)
    y = np.asarray(investment_ratio, dtype=float).ravel()
    if y.shape[0] != X.shape[0]:
        raise ValueError("investment_ratio length must match panel cells")
    if X.shape[0] < 10 * X.shape[1]:
        raise ValueError(
            f"need at least {10 * X.shape[1]} observations, got {X.shape[0]}"
        )
    _check_rank(X, names)
    coef, se = _ols_sandwich(X, y)
    quants = {}
    for tau in taus:
        qc, qse = quantile_regression(X, y, tau)
        quants[float(tau)] = (float(qc[1]), float(qse[1]))
    return InvestmentRegressionResult(
        alpha_omega_ols=float(coef[1]),
        alpha_omega_ols_se=float(se[1]),
        alpha_omega_quantiles=quants,
        coefficients_ols=coef,
        column_names=names,
    )


# ---------------------------------------------------------------------------
# cross-plant share dispersion

def nearest_rank_percentile(values, q) -> float:
    """Nearest-rank percentile: the ceil(q*n)-th smallest value."""
    vals = np.sort(np.asarray(values, dtype=float).ravel())
    if vals.size == 0:
        raise ValueError("empty sample")
    rank = int(np.ceil(q * vals.size))
    return float(vals[min(max(rank, 1), vals.size) - 1])


def _dispersion_by_group(plant_values, groups):
    out = {}
    for g in np.unique(groups):
        sel = groups == g
        if not sel.any():
            warnings.warn(f"group {g!r} is empty; skipped")
            continue
        vals = plant_values[sel]
        out[g] = nearest_rank_percentile(vals, 0.9) - nearest_rank_percentile(
            vals, 0.1)
    return out


def share_dispersion(panel: PanelData, groups=None) -> dict:
    """90-10 differences of plant-mean input shares, per group.

    Two share measures per plant: the time-mean log intermediate share
    of output and the time-mean intermediate share of variable cost
    (intermediates over intermediates plus labor, in levels). Returns
    {"sm": {group: diff}, "sm_cost": {group: diff}}.
    """
    groups = (np.zeros(panel.n_firms, dtype=int)
              if groups is None else np.asarray(groups))
    if groups.shape != (panel.n_firms,):
        raise ValueError("groups must have one entry per firm")
    sm_mean = panel.sm.mean(axis=1)
    cost_share = 1.0 / (1.0 + np.exp(panel.sl - panel.sm))
    cost_mean = cost_share.mean(axis=1)
    return {
        "sm": _dispersion_by_group(sm_mean, groups),
        "sm_cost": _dispersion_by_group(cost_mean, groups),
    }


_POLY_TERMS = (
    ("m", lambda p: p.m), ("ltilde", lambda p: p.ltilde),
    ("k", lambda p: p.k),
    ("m_sq", lambda p: p.m**2), ("ltilde_sq", lambda p: p.ltilde**2),
    ("k_sq", lambda p: p.k**2),
    ("m_ltilde", lambda p: p.m * p.ltilde),
    ("m_k", lambda p: p.m * p.k),
    ("ltilde_k", lambda p: p.ltilde * p.k),
)


def residualized_dispersion(panel: PanelData, groups=None) -> dict:
    """90-10 differences of plant-mean share residuals, per group.

    Pools all firm-years, regresses the log intermediate share on a
    second-order polynomial of (m, ltilde, k) with intercept, averages
    the residuals within each plant, and reports per-group 90-10
    percentile differences of those plant effects. Collinear
    polynomial terms are dropped with a warning.
    """
    groups = (np.zeros(panel.n_firms, dtype=int)
              if groups is None else np.asarray(groups))
    if groups.shape != (panel.n_firms,):
        raise ValueError("groups must have one entry per firm")
    for g in np.unique(groups):
        if (groups == g).sum() < 2:
            raise ValueError(f"group {g!r} has fewer than 2 plants")
    cols = [np.ones(panel.n_firms * panel.T)]
    names = ["const"]
    for name, fn in _POLY_TERMS:
        cols.append(fn(panel).ravel())
        names.append(name)
    X = np.column_stack(cols)
    keep = list(range(X.shape[1]))
    while True:
        svals = np.linalg.svd(X[:, keep], compute_uv=False)
        if svals[-1] > 1e-10 * max(svals[0], 1.0):
            break
        # drop the term whose removal most restores conditioning
        best, best_s = None, -np.inf
        for pos in range(1, len(keep)):     # never drop the intercept
            trial = keep[:pos] + keep[pos + 1:]
            s = np.linalg.svd(X[:, trial], compute_uv=False)[-1]
            if s > best_s:
                best, best_s = pos, s
        warnings.warn(
            f"dropping collinear polynomial term '{names[keep[best]]}'"
        )
        keep = keep[:best] + keep[best + 1:]
    y = panel.sm.ravel()
    coef = np.linalg.lstsq(X[:, keep], y, rcond=None)[0]
    resid = (y - X[:, keep] @ coef).reshape(panel.n_firms, panel.T)
    xi = resid.mean(axis=1)
    return _dispersion_by_group(xi, groups)
