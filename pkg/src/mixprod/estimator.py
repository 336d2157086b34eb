"""Three-stage penalized EM estimator for the mixture model.

Stage 1 fits the static share/input-ratio block by EM with exact
weighted-Gaussian M-steps in a reparametrized coordinate system where
every update is closed form. Stage 2 holds the static parameters fixed
and fits the dynamics block (time intercepts, capital elasticity,
AR(1) productivity, capital transition, initial distribution) by EM
with alternating exact weighted regressions. Stage 3 runs EM on the
full penalized objective, keeping the exact dynamic updates and using
a guarded quasi-Newton step for the static parameters of each type, so
the objective never decreases.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .likelihood import (
    PenaltyAnchors,
    _l1_rows,
    _l2_rows,
    _logsumexp_rows,
    _model_thetas,
    _theta_from_type,
    _theta_penalty,
    _type_from_theta,
    _thetas_to_vector,
    _vector_to_thetas,
    loglik_matrices,
    model_to_vector,
    penalized_objective,
    penalty_matrix,
    penalty_variance,
    objective_from_vector,
    unconstrained_to_vector,
    vector_to_unconstrained,
)
from .model import MixtureModel, TypeParameters
from .panel import PanelData

__all__ = [
    "EmSettings",
    "EstimationResult",
    "e_step",
    "m_step_stage1",
    "m_step_stage2",
    "fit",
    "single_type_closed_form",
    "default_anchors",
    "standard_errors",
    "parameter_names",
    "MixtureProductionEstimator",
]


@dataclass(frozen=True)
class EmSettings:
    """Knobs of the EM driver."""

    max_iter: int = 500
    tol_loglik: float = 1e-8
    n_starts: int = 3
    ridge_floor: float = 1e-10
    seed: int = 0
    compute_se: bool = True
    stage3_inner_iter: int = 6
    final_newton: bool = False

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.tol_loglik > 0:
            raise ValueError("tol_loglik must be positive")


@dataclass
class StageRecord:
    name: str
    n_iter: int
    converged: bool
    objective: float


@dataclass
class EstimationResult:
    """Point estimates, uncertainty, posteriors and diagnostics."""

    model: MixtureModel
    standard_errors: dict
    posterior: np.ndarray
    loglik_trace: list
    stage_diagnostics: list
    non_converged: bool
    anchors: PenaltyAnchors
    se_flags: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        vec = model_to_vector(self.model)
        names = parameter_names(self.model.J, self.model.T)
        return {
            "schema_version": 1,
            "J": self.model.J,
            "T": self.model.T,
            "parameters": dict(zip(names, map(float, vec))),
            "standard_errors": {
                k: (None if v is None or not np.isfinite(v) else float(v))
                for k, v in (self.standard_errors or {}).items()
            },
            "non_converged": bool(self.non_converged),
            "stages": [
                {
                    "name": s.name,
                    "n_iter": s.n_iter,
                    "converged": bool(s.converged),
                    "objective": float(s.objective),
                }
                for s in self.stage_diagnostics
            ],
            "posterior_mean": [float(x) for x in self.posterior.mean(axis=0)],
            "se_flags": list(self.se_flags),
        }

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)

    def save_posterior_csv(self, path):
        header = "firm_id," + ",".join(
            f"p_type{j + 1}" for j in range(self.posterior.shape[1])
        )
        np.savetxt(
            path,
            np.column_stack([np.arange(self.posterior.shape[0]), self.posterior]),
            delimiter=",",
            header=header,
            comments="",
        )


def parameter_names(J: int, T: int) -> list:
    """Names for the packed flat parameter vector, in packing order."""
    names = [f"pi_{j + 1}" for j in range(J - 1)]
    names += [f"alpha_{t + 1}" for t in range(T)]
    for j in range(J):
        s = f"_type{j + 1}"
        names += [
            f"beta_m{s}", f"beta_l{s}", f"psi{s}", f"var_eps{s}",
            f"var_zeta{s}", f"rho_epszeta{s}", f"var_v{s}",
        ]
        names += [f"beta0_{t + 1}{s}" for t in range(T)]
        names += [f"beta_k{s}", f"mu1_k{s}", f"mu1_omega{s}",
                  f"Sigma1_11{s}", f"Sigma1_12{s}", f"Sigma1_22{s}",
                  f"rho_k0{s}", f"rho_kk{s}", f"rho_komega{s}",
                  f"var_k{s}", f"rho_omega{s}", f"var_eta{s}"]
    return names


# ---------------------------------------------------------------------------
# posteriors

def _posterior_from_logw(logw):
    """Normalize per-firm log weights to probabilities."""
    shift = logw.max(axis=1, keepdims=True)
    p = np.exp(logw - shift)
    return p / p.sum(axis=1, keepdims=True)


def e_step(panel: PanelData, model: MixtureModel) -> np.ndarray:
    """Posterior type probabilities under the full likelihood."""
    l1, l2 = loglik_matrices(panel, model)
    return _posterior_from_logw(np.log(model.pi)[None, :] + l1 + l2)


# ---------------------------------------------------------------------------
# stage 1: static block in closed form
#
# Reparametrization: per type, the share pair x = (sm, sl - sm) is
# N((a_eps, a_zeta), C) iid over t with C = [[var_eps, -cross],
# [-cross, var_zeta]], and w = m - ltilde satisfies w = alpha_t + c + v.
# (beta_m, beta_l, psi) are smooth bijections of (a_eps, a_zeta, c).

def _s1_to_theta1(comp) -> dict:
    cov = comp["cov"]
    var_eps = cov[0, 0]
    var_zeta = cov[1, 1]
    rho = -cov[0, 1] / np.sqrt(var_eps * var_zeta)
    beta_m = np.exp(comp["a_eps"] - 0.5 * var_eps)
    beta_l = beta_m * np.exp(comp["a_zeta"] + 0.5 * var_zeta)
    return {
        "beta_m": beta_m,
        "beta_l": beta_l,
        "psi": comp["c"] + comp["a_zeta"],
        "var_eps": var_eps,
        "var_zeta": var_zeta,
        "rho": rho,
        "var_v": comp["var_v"],
    }


def _theta1_to_s1(th) -> dict:
    a_eps = np.log(th["beta_m"]) + 0.5 * th["var_eps"]
    a_zeta = np.log(th["beta_l"] / th["beta_m"]) - 0.5 * th["var_zeta"]
    cross = th["rho"] * np.sqrt(th["var_eps"] * th["var_zeta"])
    return {
        "a_eps": a_eps,
        "a_zeta": a_zeta,
        "cov": np.array([[th["var_eps"], -cross], [-cross, th["var_zeta"]]]),
        "c": th["psi"] - a_zeta,
        "var_v": th["var_v"],
    }


def _stage1_l1(panel, comps, alpha):
    """(n, J) static-block log densities from stage-1 state."""
    cols = []
    for comp in comps:
        th = _s1_to_theta1(comp)
        th["beta0"] = np.zeros(panel.T)
        cols.append(_l1_rows(panel, th, alpha))
    return np.stack(cols, axis=1)


def _stage1_objective(panel, pi, alpha, comps, anchors):
    l1 = _stage1_l1(panel, comps, alpha)
    obj = float(np.sum(_logsumexp_rows(np.log(pi)[None, :] + l1)))
    n = panel.n_firms
    for comp in comps:
        obj += penalty_variance(comp["var_v"], anchors.var_v0, n)
        # covariance penalty in (eps, zeta) coordinates
        th = _s1_to_theta1(comp)
        cross = th["rho"] * np.sqrt(th["var_eps"] * th["var_zeta"])
        Sig = np.array([[th["var_eps"], cross], [cross, th["var_zeta"]]])
        obj += penalty_matrix(Sig, anchors.Sigma_epszeta0, n)
    return obj


def m_step_stage1(panel, posterior, pi, alpha, comps, anchors):
    """One exact stage-1 M-step; returns (pi, alpha, comps)."""
    n, T = panel.n_firms, panel.T
    J = posterior.shape[1]
    x1, x2 = panel.sm, panel.sl - panel.sm
    w = panel.m - panel.ltilde
    # anchor for the (x1, x2) covariance: flip the off-diagonal sign
    Ax = anchors.Sigma_epszeta0 * np.array([[1.0, -1.0], [-1.0, 1.0]])

    pi_new = posterior.mean(axis=0)
    comps_new = []
    for j in range(J):
        p = posterior[:, j]
        W = T * p.sum()
        a1 = np.sum(p[:, None] * x1) / W
        a2 = np.sum(p[:, None] * x2) / W
        d1 = x1 - a1
        d2 = x2 - a2
        S = np.array([
            [np.sum(p[:, None] * d1 * d1), np.sum(p[:, None] * d1 * d2)],
            [np.sum(p[:, None] * d1 * d2), np.sum(p[:, None] * d2 * d2)],
        ])
        cov = (S + (2.0 / n) * Ax) / (W + 2.0 / n)
        comps_new.append({
            "a_eps": a1, "a_zeta": a2, "cov": cov,
            "c": comps[j]["c"], "var_v": comps[j]["var_v"],
        })

    # joint weighted LS for (alpha, c) given current var_v
    q = np.array([posterior[:, j].sum() / comps_new[j]["var_v"] for j in range(J)])
    A = np.zeros((T + J, T + J))
    rhs = np.zeros(T + J)
    wsum_tj = np.array([
        [np.sum(posterior[:, j] * w[:, t]) for j in range(J)] for t in range(T)
    ])
    for t in range(T):
        A[t, t] = q.sum()
        for j in range(J):
            A[t, T + j] = q[j]
            rhs[t] += wsum_tj[t, j] / comps_new[j]["var_v"]
    for j in range(J):
        A[T + j, T + j] = T * q[j]
        A[T + j, :T] = q[j]
        rhs[T + j] = wsum_tj[:, j].sum() / comps_new[j]["var_v"]
    sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
    alpha_new = sol[:T]
    for j in range(J):
        comps_new[j]["c"] = sol[T + j]

    # penalized variance of the wage shock
    for j in range(J):
        p = posterior[:, j]
        res = w - alpha_new[None, :] - comps_new[j]["c"]
        S = np.sum(p[:, None] * res * res)
        W = T * p.sum()
        comps_new[j]["var_v"] = (S + 2.0 * anchors.var_v0 / n) / (W + 2.0 / n)
    return pi_new, alpha_new, comps_new


def _stage1_em(panel, posterior0, anchors, settings):
    """Run stage-1 EM from an initial posterior."""
    J = posterior0.shape[1]
    pi = posterior0.mean(axis=0)
    alpha = np.zeros(panel.T)
    comps = [{"a_eps": 0.0, "a_zeta": 0.0, "cov": np.eye(2),
              "c": 0.0, "var_v": 1.0} for _ in range(J)]
    pi, alpha, comps = m_step_stage1(panel, posterior0, pi, alpha, comps, anchors)
    # second pass so var_v leaves its unit initialization
    pi, alpha, comps = m_step_stage1(panel, posterior0, pi, alpha, comps, anchors)
    trace = [_stage1_objective(panel, pi, alpha, comps, anchors)]
    converged = False
    for _ in range(settings.max_iter):
        l1 = _stage1_l1(panel, comps, alpha)
        post = _posterior_from_logw(np.log(pi)[None, :] + l1)
        if post.sum(axis=0).min() < J / panel.n_firms:
            raise _DegenerateStart()
        pi, alpha, comps = m_step_stage1(panel, post, pi, alpha, comps, anchors)
        trace.append(_stage1_objective(panel, pi, alpha, comps, anchors))
        if abs(trace[-1] - trace[-2]) < settings.tol_loglik:
            converged = True
            break
    return pi, alpha, comps, trace, converged


class _DegenerateStart(Exception):
    """A type lost essentially all posterior weight."""


# ---------------------------------------------------------------------------
# stage 2: dynamics block by alternating exact weighted regressions

def _omega_base(panel, th, wedge):
    """omega = base - beta0_t - beta_k * k; base collects the rest."""
    scale = 1.0 - th["beta_m"] - th["beta_l"]
    lm = panel.ltilde - panel.m
    const_t = np.log(th["beta_m"]) + 0.5 * th["var_eps"] - wedge
    return (
        scale * panel.m
        - th["beta_l"] * th["psi"]
        - const_t[None, :]
        - th["beta_l"] * lm
    )


def _omega_of(panel, th, wedge):
    base = _omega_base(panel, th, wedge)
    return base - th["beta0"][None, :] - th["beta_k"] * panel.k


def _update_gamma(panel, p, th, wedge):
    """Exact weighted GLS for (beta0_1..beta0_T, beta_k)."""
    T = panel.T
    base = _omega_base(panel, th, wedge)
    k = panel.k
    dim = T + 1
    M = np.zeros((dim, dim))
    rhs = np.zeros(dim)

    def accumulate(Xcols, a, weight):
        # Xcols: dict col -> (n,) coefficients of "a - X gamma" rows
        cols = sorted(Xcols)
        for ci in cols:
            xi = Xcols[ci]
            rhs[ci] += np.sum(weight * xi * a)
            for cj in cols:
                M[ci, cj] += np.sum(weight * xi * Xcols[cj])

    # initial condition, whitened by the Cholesky factor of Sigma_1
    S1 = np.array([[th["S11"], th["S12"]], [th["S12"], th["S22"]]])
    L = np.linalg.cholesky(S1)
    l11, l21, l22 = L[0, 0], L[1, 0], L[1, 1]
    a0 = (base[:, 0] - th["mu1"][1]) / l22 - l21 * (k[:, 0] - th["mu1"][0]) / (l11 * l22)
    accumulate({0: np.full(panel.n_firms, 1.0 / l22), T: k[:, 0] / l22}, a0, p)

    s_eta = np.sqrt(th["var_eta"])
    s_k = np.sqrt(th["var_k"])
    for t in range(1, T):
        # AR(1) innovation rows
        a = (base[:, t] - th["rho_omega"] * base[:, t - 1]) / s_eta
        X = {
            t: np.full(panel.n_firms, 1.0 / s_eta),
            t - 1: np.full(panel.n_firms, -th["rho_omega"] / s_eta),
            T: (k[:, t] - th["rho_omega"] * k[:, t - 1]) / s_eta,
        }
        accumulate(X, a, p)
        # capital transition rows
        a = (
            k[:, t]
            - th["rho_k0"]
            - th["rho_kk"] * k[:, t - 1]
            - th["rho_komega"] * base[:, t - 1]
        ) / s_k
        X = {
            t - 1: np.full(panel.n_firms, -th["rho_komega"] / s_k),
            T: -th["rho_komega"] * k[:, t - 1] / s_k,
        }
        accumulate(X, a, p)

    gamma = np.linalg.solve(M, rhs)
    th["beta0"] = gamma[:T]
    th["beta_k"] = gamma[T]


def _update_dynamics(panel, p, th, anchors, wedge, n=None):
    """Exact weighted updates of the non-gamma dynamic parameters.

    ``n`` is the sample size entering the penalty weight; passing a
    huge value turns the updates into plain weighted MLE.
    """
    if n is None:
        n = panel.n_firms
    omega = _omega_of(panel, th, wedge)
    k = panel.k
    Wp = p.sum()

    # initial distribution with matrix penalty
    z = np.column_stack([k[:, 0], omega[:, 0]])
    mu1 = (p[:, None] * z).sum(axis=0) / Wp
    d = z - mu1[None, :]
    S = (p[:, None] * d).T @ d
    S1 = (S + (2.0 / n) * anchors.Sigma1_0) / (Wp + 2.0 / n)
    th["mu1"] = mu1
    th["S11"], th["S12"], th["S22"] = S1[0, 0], S1[0, 1], S1[1, 1]

    # AR(1) coefficient through the origin and penalized innovation var
    lag, cur = omega[:, :-1], omega[:, 1:]
    denom = np.sum(p[:, None] * lag * lag)
    th["rho_omega"] = np.sum(p[:, None] * cur * lag) / denom
    eta = cur - th["rho_omega"] * lag
    S = np.sum(p[:, None] * eta * eta)
    W = (panel.T - 1) * Wp
    th["var_eta"] = (S + 2.0 * anchors.var_eta0 / n) / (W + 2.0 / n)

    # capital transition by weighted OLS and penalized variance
    Z = np.stack(
        [np.ones_like(lag), k[:, :-1], lag], axis=2
    ).reshape(-1, 3)
    target = k[:, 1:].reshape(-1)
    wt = np.repeat(p, panel.T - 1)
    Mz = (wt[:, None] * Z).T @ Z
    bz = (wt[:, None] * Z).T @ target
    coef = np.linalg.solve(Mz, bz)
    th["rho_k0"], th["rho_kk"], th["rho_komega"] = coef
    res = target - Z @ coef
    S = np.sum(wt * res * res)
    th["var_k"] = (S + 2.0 * anchors.var_k0 / n) / (W + 2.0 / n)


def _theta2_to_u2(th, T):
    S1 = np.array([[th["S11"], th["S12"]], [th["S12"], th["S22"]]])
    L = np.linalg.cholesky(S1)
    return np.concatenate([
        np.asarray(th["beta0"], dtype=float),
        [th["beta_k"], th["mu1"][0], th["mu1"][1],
         np.log(L[0, 0]), L[1, 0], np.log(L[1, 1]),
         th["rho_k0"], th["rho_kk"], th["rho_komega"],
         np.log(th["var_k"]), th["rho_omega"], np.log(th["var_eta"])],
    ])


def _u2_into_theta(u2, th, T):
    th["beta0"] = np.array(u2[:T])
    (th["beta_k"], mk, mo, ll11, l21, ll22, th["rho_k0"], th["rho_kk"],
     th["rho_komega"], lvk, th["rho_omega"], lve) = u2[T:]
    th["mu1"] = np.array([mk, mo])
    l11, l22 = np.exp(ll11), np.exp(ll22)
    th["S11"] = l11 * l11
    th["S12"] = l11 * l21
    th["S22"] = l21 * l21 + l22 * l22
    th["var_k"] = np.exp(lvk)
    th["var_eta"] = np.exp(lve)


def _weighted_l2_obj(panel, p, th, anchors, wedge, n):
    val = float(p @ _l2_rows(panel, th, wedge))
    return val + float(np.real(_theta_penalty(th, anchors, n, "stage2")))


def _update_theta2_exact(panel, p, th, anchors, wedge, n=None, maxiter=300):
    """Guarded high-precision maximization of one type's dynamic block."""
    if n is None:
        n = panel.n_firms
    T = panel.T
    before = _weighted_l2_obj(panel, p, th, anchors, wedge, n)
    work = dict(th)

    def negobj(u2):
        _u2_into_theta(u2, work, T)
        val = _weighted_l2_obj(panel, p, work, anchors, wedge, n)
        return -val if np.isfinite(val) else 1e12

    res = minimize(
        negobj, _theta2_to_u2(th, T), method="L-BFGS-B",
        options={"maxiter": maxiter, "ftol": 1e-14, "gtol": 1e-10},
    )
    _u2_into_theta(res.x, work, T)
    after = _weighted_l2_obj(panel, p, work, anchors, wedge, n)
    if after > before:
        th.update(work)


def m_step_stage2(panel, posterior, thetas, anchors, wedge=None):
    """One exact stage-2 M-step over all types; returns (pi, thetas)."""
    if wedge is None:
        wedge = np.zeros(panel.T)
    pi = posterior.mean(axis=0)
    for j, th in enumerate(thetas):
        p = posterior[:, j]
        _update_dynamics(panel, p, th, anchors, wedge)
        _update_gamma(panel, p, th, wedge)
    return pi, thetas


def _full_objective(panel, pi, alpha, thetas, anchors, stage, wedge):
    l1, l2 = loglik_matrices(panel, (alpha, thetas), wedge)
    obj = float(np.sum(_logsumexp_rows(np.log(pi)[None, :] + l1 + l2)))
    for th in thetas:
        obj += float(np.real(_theta_penalty(th, anchors, panel.n_firms, stage)))
    return obj


def _stage2_em(panel, pi, alpha, thetas, anchors, settings, wedge):
    trace = [_full_objective(panel, pi, alpha, thetas, anchors, "stage2", wedge)]
    converged = False
    polish = False
    for it in range(settings.max_iter):
        l1, l2 = loglik_matrices(panel, (alpha, thetas), wedge)
        post = _posterior_from_logw(np.log(pi)[None, :] + l1 + l2)
        if post.sum(axis=0).min() < len(thetas) / panel.n_firms:
            raise _DegenerateStart()
        pi = post.mean(axis=0)
        for j, th in enumerate(thetas):
            p = post[:, j]
            if polish:
                _update_theta2_exact(panel, p, th, anchors, wedge)
            else:
                _update_dynamics(panel, p, th, anchors, wedge)
                _update_gamma(panel, p, th, wedge)
        trace.append(_full_objective(panel, pi, alpha, thetas, anchors, "stage2", wedge))
        gain = abs(trace[-1] - trace[-2])
        if gain < settings.tol_loglik and polish:
            converged = True
            break
        # cheap block cycles first, then full quasi-Newton M-steps for
        # the slowly converging weakly curved directions
        if not polish and (it >= 40 or gain < max(100 * settings.tol_loglik, 1e-3)):
            polish = True
    return pi, thetas, trace, converged


# ---------------------------------------------------------------------------
# stage 3: full EM with guarded static-parameter updates

_U_KEYS = ("beta_m", "beta_l", "psi", "var_eps", "var_zeta", "rho", "var_v")


def _theta1_to_u(th):
    return np.array([
        np.log(th["beta_m"]), np.log(th["beta_l"]), th["psi"],
        np.log(th["var_eps"]), np.log(th["var_zeta"]),
        np.arctanh(th["rho"]), np.log(th["var_v"]),
    ])


def _u_into_theta(u, th):
    th["beta_m"] = np.exp(u[0])
    th["beta_l"] = np.exp(u[1])
    th["psi"] = u[2]
    th["var_eps"] = np.exp(u[3])
    th["var_zeta"] = np.exp(u[4])
    th["rho"] = np.tanh(u[5])
    th["var_v"] = np.exp(u[6])


def _weighted_type_obj(panel, p, th, alpha, anchors, wedge):
    """Posterior-weighted complete-data objective for one type's theta1."""
    if th["beta_m"] + th["beta_l"] >= 1.0 - 1e-10:
        return -np.inf
    l1 = _l1_rows(panel, th, alpha)
    l2 = _l2_rows(panel, th, wedge)
    val = float(np.sum(p * (l1 + l2)))
    val += float(np.real(_theta_penalty(th, anchors, panel.n_firms, "stage1")))
    return val


def _guarded_theta1_update(panel, p, th, alpha, anchors, wedge, maxiter):
    """Improve theta1 by L-BFGS-B in unconstrained coordinates."""
    before = _weighted_type_obj(panel, p, th, alpha, anchors, wedge)
    u0 = _theta1_to_u(th)
    work = dict(th)

    def negobj(u):
        _u_into_theta(u, work)
        val = _weighted_type_obj(panel, p, work, alpha, anchors, wedge)
        return -val if np.isfinite(val) else 1e12

    res = minimize(negobj, u0, method="L-BFGS-B", options={"maxiter": maxiter})
    _u_into_theta(res.x, work)
    after = _weighted_type_obj(panel, p, work, alpha, anchors, wedge)
    if after > before:
        for key in _U_KEYS:
            th[key] = work[key]


def _update_alpha(panel, posterior, thetas, alpha):
    """Exact weighted update of the shared log price ratios."""
    w = panel.m - panel.ltilde
    num = np.zeros(panel.T)
    den = 0.0
    for j, th in enumerate(thetas):
        c = th["psi"] - (np.log(th["beta_l"] / th["beta_m"]) - 0.5 * th["var_zeta"])
        q = posterior[:, j] / th["var_v"]
        num += (q[:, None] * (w - c)).sum(axis=0)
        den += q.sum()
    return num / den


def _stage3_em(panel, pi, alpha, thetas, anchors, settings, wedge):
    trace = [_full_objective(panel, pi, alpha, thetas, anchors, "full", wedge)]
    converged = False
    polish = False
    for it in range(settings.max_iter):
        l1, l2 = loglik_matrices(panel, (alpha, thetas), wedge)
        post = _posterior_from_logw(np.log(pi)[None, :] + l1 + l2)
        if post.sum(axis=0).min() < len(thetas) / panel.n_firms:
            raise _DegenerateStart()
        pi = post.mean(axis=0)
        for j, th in enumerate(thetas):
            p = post[:, j]
            inner = 200 if polish else settings.stage3_inner_iter
            _guarded_theta1_update(panel, p, th, alpha, anchors, wedge, inner)
            if polish:
                _update_theta2_exact(panel, p, th, anchors, wedge)
            else:
                _update_dynamics(panel, p, th, anchors, wedge)
                _update_gamma(panel, p, th, wedge)
        alpha = _update_alpha(panel, post, thetas, alpha)
        trace.append(_full_objective(panel, pi, alpha, thetas, anchors, "full", wedge))
        gain = abs(trace[-1] - trace[-2])
        if gain < settings.tol_loglik and polish:
            converged = True
            break
        if not polish and (it >= 40 or gain < max(100 * settings.tol_loglik, 1e-3)):
            polish = True
    return pi, alpha, thetas, trace, converged


# ---------------------------------------------------------------------------
# one-component closed form (anchor fit) and initialization

def single_type_closed_form(panel, tol=1e-12, max_iter=2000):
    """Unpenalized J=1 fit via sample moments and exact block iteration.

    Also serves as the reference the EM fit must match at J=1, and as
    the source of the penalty anchors.
    """
    n, T = panel.n_firms, panel.T
    x1, x2 = panel.sm, panel.sl - panel.sm
    w = panel.m - panel.ltilde
    a_eps = x1.mean()
    a_zeta = x2.mean()
    d = np.column_stack([(x1 - a_eps).ravel(), (x2 - a_zeta).ravel()])
    cov = d.T @ d / (n * T)
    comp = {"a_eps": a_eps, "a_zeta": a_zeta, "cov": cov, "c": 0.0, "var_v": 1.0}
    th1 = _s1_to_theta1(comp)
    th1["psi"] = 0.0
    c = -(np.log(th1["beta_l"] / th1["beta_m"]) - 0.5 * th1["var_zeta"])
    alpha = w.mean(axis=0) - c
    res = w - alpha[None, :] - c
    th1["var_v"] = float(np.mean(res * res))

    th = dict(th1)
    th["beta0"] = np.zeros(T)
    th["beta_k"] = 0.1
    th["mu1"] = np.zeros(2)
    th["S11"], th["S12"], th["S22"] = 1.0, 0.0, 1.0
    th["rho_k0"], th["rho_kk"], th["rho_komega"] = 0.0, 0.5, 0.0
    th["var_k"], th["rho_omega"], th["var_eta"] = 1.0, 0.5, 1.0
    wedge = np.zeros(T)
    base = _omega_base(panel, th, wedge)
    th["beta0"] = (base - th["beta_k"] * panel.k).mean(axis=0)

    # huge penalty sample size turns the updates into plain weighted MLE
    free = PenaltyAnchors(
        var_v0=1.0, var_k0=1.0, var_eta0=1.0,
        Sigma_epszeta0=np.eye(2), Sigma1_0=np.eye(2),
    )
    p = np.ones(n)
    prev = None
    for _ in range(50):
        _update_dynamics(panel, p, th, free, wedge, n=int(1e30))
        _update_gamma(panel, p, th, wedge)
        cur = float(np.sum(_l2_rows(panel, th, wedge)))
        if prev is not None and abs(cur - prev) < 1e-8:
            break
        prev = cur
    # the block alternation converges slowly along the weakly
    # identified beta0_1 / mu1 direction; finish with a joint step
    for _ in range(max_iter):
        _update_theta2_exact(panel, p, th, free, wedge, n=int(1e30))
        cur = float(np.sum(_l2_rows(panel, th, wedge)))
        if abs(cur - prev) < tol:
            break
        prev = cur

    model = MixtureModel(
        pi=np.array([1.0]),
        alpha_t=alpha,
        types=(_type_from_theta(th),),
    )
    return model


def default_anchors(panel) -> PenaltyAnchors:
    """Penalty anchors from the one-component closed-form fit."""
    model = single_type_closed_form(panel)
    tp = model.types[0]
    return PenaltyAnchors(
        var_v0=tp.sigma_v**2,
        var_k0=tp.sigma_k**2,
        var_eta0=tp.sigma_eta**2,
        Sigma_epszeta0=tp.Sigma_epszeta,
        Sigma1_0=np.array(tp.Sigma1),
    )


def _kmeans(features, J, rng, n_iter=50):
    """Small Lloyd's algorithm with greedy plus-plus seeding."""
    n = features.shape[0]
    centers = [features[rng.integers(n)]]
    for _ in range(J - 1):
        dist = np.min(
            [np.sum((features - c) ** 2, axis=1) for c in centers], axis=0
        )
        prob = dist / dist.sum() if dist.sum() > 0 else np.full(n, 1.0 / n)
        centers.append(features[rng.choice(n, p=prob)])
    centers = np.array(centers)
    labels = np.zeros(n, dtype=int)
    for _ in range(n_iter):
        d2 = ((features[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(J):
            sel = labels == j
            if sel.any():
                centers[j] = features[sel].mean(axis=0)
    return labels


def _initial_posterior(panel, J, rng, perturb):
    feats = np.column_stack([
        panel.sm.mean(axis=1),
        (panel.sl - panel.sm).mean(axis=1),
        (panel.m - panel.ltilde).mean(axis=1),
    ])
    feats = (feats - feats.mean(axis=0)) / np.maximum(feats.std(axis=0), 1e-12)
    labels = _kmeans(feats, J, rng)
    if perturb:
        flip = rng.random(panel.n_firms) < 0.25
        labels = np.where(flip, rng.integers(0, J, panel.n_firms), labels)
    post = np.full((panel.n_firms, J), 0.05 / max(J - 1, 1))
    post[np.arange(panel.n_firms), labels] = 0.95
    return post / post.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# optional full-vector Newton refinement

def _newton_polish(vec, panel, anchors, J, T, max_newton=10):
    """Sharpen a near-optimal solution with guarded Newton steps.

    Works in unconstrained coordinates; the gradient comes from
    complex-step differentiation and the Hessian from central
    differences of that gradient. Steps are accepted only when the
    penalized objective does not fall. Useful because weakly curved
    directions (initial-period intercept against the initial
    productivity mean) converge slowly under coordinate updates.
    """
    D = vec.shape[0]

    def fval(u):
        v = unconstrained_to_vector(u, J, T)
        return float(np.real(objective_from_vector(v, panel, anchors, J, T)))

    def grad(u):
        g = np.empty(D)
        for i in range(D):
            z = u.astype(complex)
            z[i] += 1e-20j
            v = unconstrained_to_vector(z, J, T)
            g[i] = np.imag(objective_from_vector(v, panel, anchors, J, T)) / 1e-20
        return g

    u = vector_to_unconstrained(vec, J, T)
    f0 = fval(u)
    for _ in range(max_newton):
        g = grad(u)
        if np.abs(g).max() < 1e-11:
            break
        H = np.empty((D, D))
        h = 1e-5
        for i in range(D):
            up = u.copy()
            dn = u.copy()
            up[i] += h
            dn[i] -= h
            H[:, i] = (grad(up) - grad(dn)) / (2.0 * h)
        H = 0.5 * (H + H.T)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        improved = False
        for s in (1.0, 0.5, 0.25, 0.1, 0.01):
            cand = u - s * step
            try:
                fc = fval(cand)
            except (ValueError, FloatingPointError):
                continue
            if fc >= f0 - 1e-12:
                u, f0, improved = cand, fc, True
                break
        if not improved:
            break
    return unconstrained_to_vector(u, J, T)


def _canonicalize(pi, alpha, thetas, posterior):
    order = sorted(
        range(len(thetas)),
        key=lambda j: (-float(thetas[j]["beta_m"]), -float(thetas[j]["beta_l"])),
    )
    pi = pi[order]
    thetas = [thetas[j] for j in order]
    posterior = posterior[:, order]
    # impose sum_j pi_j exp(psi_j) = 1 by the invariant reparametrization
    delta = float(np.log(np.sum(pi * np.exp([th["psi"] for th in thetas]))))
    for th in thetas:
        th["psi"] = th["psi"] - delta
        th["beta0"] = th["beta0"] + th["beta_l"] * delta
    alpha = alpha + delta
    return pi, alpha, thetas, posterior


def fit(panel: PanelData, J: int, settings: EmSettings = None,
        anchors: PenaltyAnchors = None) -> EstimationResult:
    """Three-stage penalized EM fit with multistart."""
    if J < 1:
        raise ValueError("J must be a positive integer")
    if panel.T < 4:
        raise ValueError("panel must have T >= 4")
    settings = settings or EmSettings()
    if anchors is None:
        anchors = default_anchors(panel)
    base_model = single_type_closed_form(panel)
    if J == 1:
        # one component: the blockwise Gaussian solution is exact and
        # the variance penalties are stationary at the default anchors,
        # so no EM pass is needed
        model = base_model
        posterior = np.ones((panel.n_firms, 1))
        obj = penalized_objective(panel, model, anchors)
        ses, flags = (None, [])
        if settings.compute_se:
            ses, flags = standard_errors(panel, model, anchors)
        return EstimationResult(
            model=model,
            standard_errors=ses,
            posterior=posterior,
            loglik_trace=[[obj]],
            stage_diagnostics=[StageRecord("closed_form", 0, True, obj)],
            non_converged=False,
            anchors=anchors,
            se_flags=flags,
        )
    base_theta = _theta_from_type(base_model.types[0])
    wedge = np.zeros(panel.T)

    root = np.random.SeedSequence(settings.seed)
    best = None
    for start in range(max(settings.n_starts, 1)):
        rng = np.random.default_rng(root.spawn(1)[0])
        attempts = 0
        while True:
            try:
                if J == 1:
                    post0 = np.ones((panel.n_firms, 1))
                else:
                    post0 = _initial_posterior(
                        panel, J, rng, perturb=(start > 0 or attempts > 0)
                    )
                pi, alpha, comps, tr1, conv1 = _stage1_em(
                    panel, post0, anchors, settings
                )
                thetas = []
                for comp in comps:
                    th = dict(base_theta)
                    th.update(_s1_to_theta1(comp))
                    th["beta0"] = np.array(base_theta["beta0"])
                    th["mu1"] = np.array(base_theta["mu1"])
                    thetas.append(th)
                pi, thetas, tr2, conv2 = _stage2_em(
                    panel, pi, alpha, thetas, anchors, settings, wedge
                )
                pi, alpha, thetas, tr3, conv3 = _stage3_em(
                    panel, pi, alpha, thetas, anchors, settings, wedge
                )
                break
            except _DegenerateStart:
                attempts += 1
                if attempts > 3:
                    raise RuntimeError(
                        "initialization repeatedly collapsed a type"
                    )
        obj = tr3[-1]
        if best is None or obj > best["obj"]:
            best = {
                "obj": obj, "pi": pi, "alpha": alpha, "thetas": thetas,
                "traces": [tr1, tr2, tr3],
                "convs": [conv1, conv2, conv3],
            }

    pi, alpha, thetas = best["pi"], best["alpha"], best["thetas"]
    if settings.final_newton:
        vec = _thetas_to_vector(pi, alpha, thetas)
        vec = _newton_polish(vec, panel, anchors, J, panel.T)
        pi, alpha, thetas = _vector_to_thetas(vec, J, panel.T)
        pi = np.asarray(pi, dtype=float)
        alpha = np.asarray(alpha, dtype=float)
    l1, l2 = loglik_matrices(panel, (alpha, thetas), wedge)
    posterior = _posterior_from_logw(np.log(pi)[None, :] + l1 + l2)
    pi, alpha, thetas, posterior = _canonicalize(pi, alpha, thetas, posterior)

    model = MixtureModel(
        pi=np.clip(pi, 0.0, None) / np.clip(pi, 0.0, None).sum(),
        alpha_t=np.asarray(alpha, dtype=float),
        types=tuple(_type_from_theta(th) for th in thetas),
    )
    stage_names = ["stage1", "stage2", "stage3"]
    diags = [
        StageRecord(name, len(tr) - 1, conv, tr[-1])
        for name, tr, conv in zip(stage_names, best["traces"], best["convs"])
    ]
    non_converged = not best["convs"][-1]
    ses, flags = (None, [])
    if settings.compute_se:
        ses, flags = standard_errors(panel, model, anchors)
    return EstimationResult(
        model=model,
        standard_errors=ses,
        posterior=posterior,
        loglik_trace=best["traces"],
        stage_diagnostics=diags,
        non_converged=non_converged,
        anchors=anchors,
        se_flags=flags,
    )


# ---------------------------------------------------------------------------
# standard errors

def _per_firm_q(vec, panel, J, T):
    pi, alpha, thetas = _vector_to_thetas(vec, J, T)
    l1, l2 = loglik_matrices(panel, (alpha, thetas))
    return _logsumexp_rows(np.log(pi)[None, :] + l1 + l2)


def standard_errors(panel, model: MixtureModel, anchors=None, h=1e-6):
    """Outer-product-of-scores standard errors for all parameters.

    The labor-quality shift of the first type is held fixed (it is
    confounded with alpha and the time intercepts through an invariant
    reparametrization), and its entry is reported as nan.
    """
    J, T = model.J, model.T
    vec = model_to_vector(model)
    names = parameter_names(J, T)
    D = vec.shape[0]
    scores = np.empty((panel.n_firms, D))
    for idx in range(D):
        up = vec.copy()
        dn = vec.copy()
        step = h * max(1.0, abs(vec[idx]))
        up[idx] += step
        dn[idx] -= step
        scores[:, idx] = (
            _per_firm_q(up, panel, J, T) - _per_firm_q(dn, panel, J, T)
        ) / (2.0 * step)

    psi_idx = (J - 1) + T + 2  # psi of the first type in packing order
    keep = [i for i in range(D) if i != psi_idx]
    opg = scores[:, keep].T @ scores[:, keep]
    flags = []
    try:
        cov = np.linalg.inv(opg)
        if not np.all(np.isfinite(cov)) or np.any(np.diag(cov) < 0):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(opg)
        flags.append("singular_information_pseudo_inverse")
    se = np.full(D, np.nan)
    se[keep] = np.sqrt(np.maximum(np.diag(cov), 0.0))
    table = dict(zip(names, se))

    # delta method for derived per-type summaries
    for j in range(J):
        tp = model.types[j]
        offset = (J - 1) + T + j * (19 + T)
        i_bm, i_bl = offset, offset + 1
        i_bk = offset + 7 + T
        idx3 = [keep.index(i) for i in (i_bm, i_bl, i_bk) if i in keep]
        sub = cov[np.ix_(idx3, idx3)]
        g_rts = np.ones(3)
        g_kl = np.array([0.0, -tp.beta_k / tp.beta_l**2, 1.0 / tp.beta_l])
        table[f"rts_type{j + 1}"] = float(np.sqrt(g_rts @ sub @ g_rts))
        table[f"kl_ratio_type{j + 1}"] = float(np.sqrt(g_kl @ sub @ g_kl))
    return table, flags


# ---------------------------------------------------------------------------
# estimator-object front end

class MixtureProductionEstimator:
    """Estimator-style wrapper: fit / predict / predict_proba."""

    def __init__(self, J=2, max_iter=500, tol_loglik=1e-9, n_starts=3,
                 seed=0, compute_se=False):
        self.J = J
        self.max_iter = max_iter
        self.tol_loglik = tol_loglik
        self.n_starts = n_starts
        self.seed = seed
        self.compute_se = compute_se

    def get_params(self, deep=True):
        return {
            "J": self.J, "max_iter": self.max_iter,
            "tol_loglik": self.tol_loglik, "n_starts": self.n_starts,
            "seed": self.seed, "compute_se": self.compute_se,
        }

    def set_params(self, **params):
        for key, val in params.items():
            if key not in self.get_params():
                raise ValueError(f"unknown parameter {key}")
            setattr(self, key, val)
        return self

    def fit(self, panel: PanelData, y=None):
        if not isinstance(panel, PanelData):
            raise TypeError("fit expects a PanelData")
        settings = EmSettings(
            max_iter=self.max_iter, tol_loglik=self.tol_loglik,
            n_starts=self.n_starts, seed=self.seed,
            compute_se=self.compute_se,
        )
        self.result_ = fit(panel, self.J, settings)
        self.model_ = self.result_.model
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted")

    def predict_proba(self, panel: PanelData):
        self._check_fitted()
        return e_step(panel, self.model_)

    def predict(self, panel: PanelData):
        self._check_fitted()
        return self.predict_proba(panel).argmax(axis=1)
