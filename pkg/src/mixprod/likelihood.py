"""Mixture likelihood, penalties, and the penalized objective.

The per-type density factors into a static block L1 (shares and the
input-ratio equation, iid over t) and a dynamic block L2 (initial
(k, omega), AR(1) innovations, capital transition, and the Jacobian of
the m -> omega change of variables). Everything here is written so
that the same code also evaluates at complex-valued parameters, which
makes complex-step differentiation exact; public entry points validate
real parameters first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import MixtureModel, TypeParameters

__all__ = [
    "PenaltyAnchors",
    "l1_contribution",
    "l2_contribution",
    "mixture_loglik",
    "penalty_variance",
    "penalty_matrix",
    "penalized_objective",
    "model_to_vector",
    "vector_to_model",
    "n_parameters",
    "vector_to_unconstrained",
    "unconstrained_to_vector",
    "gradient_complex_step",
    "gradient_central_fd",
]

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class PenaltyAnchors:
    """One-component reference estimates anchoring the penalties."""

    var_v0: float
    var_k0: float
    var_eta0: float
    Sigma_epszeta0: np.ndarray
    Sigma1_0: np.ndarray

    def __post_init__(self):
        for name in ("var_v0", "var_k0", "var_eta0"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        for name in ("Sigma_epszeta0", "Sigma1_0"):
            mat = np.asarray(getattr(self, name), dtype=float)
            if mat.shape != (2, 2) or not np.allclose(mat, mat.T):
                raise ValueError(f"{name} must be symmetric 2x2")
            if np.linalg.det(mat) <= 0.0 or mat[0, 0] <= 0.0:
                raise ValueError(f"{name} must be positive definite")
            object.__setattr__(self, name, mat)


# ---------------------------------------------------------------------------
# parameter containers
#
# Internally a type is a plain dict of (possibly complex) scalars plus the
# beta0 and mu1 arrays; this sidesteps dataclass validation when evaluating
# at perturbed points.

_SCALAR_KEYS = (
    "beta_m", "beta_l", "psi", "var_eps", "var_zeta", "rho", "var_v",
)
_DYN_KEYS = (
    "beta_k", "S11", "S12", "S22",
    "rho_k0", "rho_kk", "rho_komega", "var_k", "rho_omega", "var_eta",
)


def _theta_from_type(tp: TypeParameters) -> dict:
    return {
        "beta_m": tp.beta_m,
        "beta_l": tp.beta_l,
        "psi": tp.psi,
        "var_eps": tp.sigma_eps**2,
        "var_zeta": tp.sigma_zeta**2,
        "rho": tp.rho_epszeta,
        "var_v": tp.sigma_v**2,
        "beta0": np.array(tp.beta0_t),
        "beta_k": tp.beta_k,
        "mu1": np.array(tp.mu1),
        "S11": tp.Sigma1[0, 0],
        "S12": tp.Sigma1[0, 1],
        "S22": tp.Sigma1[1, 1],
        "rho_k0": tp.rho_k0,
        "rho_kk": tp.rho_kk,
        "rho_komega": tp.rho_komega,
        "var_k": tp.sigma_k**2,
        "rho_omega": tp.rho_omega,
        "var_eta": tp.sigma_eta**2,
    }


def _type_from_theta(th: dict) -> TypeParameters:
    Sigma1 = np.array(
        [[th["S11"].real if np.iscomplexobj(th["S11"]) else th["S11"], th["S12"]],
         [th["S12"], th["S22"]]], dtype=float
    )
    return TypeParameters(
        beta_m=float(np.real(th["beta_m"])),
        beta_l=float(np.real(th["beta_l"])),
        beta_k=float(np.real(th["beta_k"])),
        beta0_t=np.real(th["beta0"]).astype(float),
        psi=float(np.real(th["psi"])),
        sigma_eps=float(np.sqrt(np.real(th["var_eps"]))),
        sigma_zeta=float(np.sqrt(np.real(th["var_zeta"]))),
        rho_epszeta=float(np.real(th["rho"])),
        sigma_v=float(np.sqrt(np.real(th["var_v"]))),
        rho_omega=float(np.real(th["rho_omega"])),
        sigma_eta=float(np.sqrt(np.real(th["var_eta"]))),
        rho_k0=float(np.real(th["rho_k0"])),
        rho_kk=float(np.real(th["rho_kk"])),
        rho_komega=float(np.real(th["rho_komega"])),
        sigma_k=float(np.sqrt(np.real(th["var_k"]))),
        mu1=np.real(th["mu1"]).astype(float),
        Sigma1=Sigma1,
    )


def _model_thetas(model: MixtureModel):
    return [_theta_from_type(tp) for tp in model.types]


# ---------------------------------------------------------------------------
# log-density blocks (vectorized over firms, complex-safe)

def _log_phi(x):
    return -0.5 * LOG_2PI - 0.5 * x * x


def _l1_rows(panel, th, alpha):
    """Static-block log density per firm, (n,) array."""
    s_eps = np.sqrt(th["var_eps"])
    s_zeta = np.sqrt(th["var_zeta"])
    s_v = np.sqrt(th["var_v"])
    rho = th["rho"]
    one_m_r2 = 1.0 - rho * rho
    eps = -panel.sm + np.log(th["beta_m"]) + 0.5 * th["var_eps"]
    zeta = (
        panel.sl - panel.sm
        - (np.log(th["beta_l"]) - np.log(th["beta_m"]))
        + 0.5 * th["var_zeta"]
    )
    v = -(
        (panel.ltilde - panel.m)
        + alpha[None, :]
        + (np.log(th["beta_m"]) - np.log(th["beta_l"]))
        + 0.5 * th["var_zeta"]
        + th["psi"]
    )
    cond = (zeta - rho * (s_zeta / s_eps) * eps) / (np.sqrt(one_m_r2) * s_zeta)
    per_t = (
        _log_phi(eps / s_eps)
        + _log_phi(cond)
        - np.log(np.sqrt(one_m_r2) * s_eps * s_zeta)
        + _log_phi(v / s_v)
        - np.log(s_v)
    )
    return per_t.sum(axis=1)


def _l2_rows(panel, th, wedge):
    """Dynamic-block log density per firm, (n,) array."""
    scale = 1.0 - th["beta_m"] - th["beta_l"]
    beta_t = (
        th["beta0"] + np.log(th["beta_m"]) + 0.5 * th["var_eps"] - wedge
    )
    lm = panel.ltilde - panel.m
    omega = (
        scale * panel.m
        - th["beta_l"] * th["psi"]
        - beta_t[None, :]
        - th["beta_l"] * lm
        - th["beta_k"] * panel.k
    )
    T = panel.T
    out = T * np.log(scale)

    # initial bivariate normal of (k_1, omega_1)
    d1 = panel.k[:, 0] - th["mu1"][0]
    d2 = omega[:, 0] - th["mu1"][1]
    det = th["S11"] * th["S22"] - th["S12"] * th["S12"]
    quad = (th["S22"] * d1 * d1 - 2.0 * th["S12"] * d1 * d2 + th["S11"] * d2 * d2) / det
    out = out - LOG_2PI - 0.5 * np.log(det) - 0.5 * quad

    # AR(1) innovations and the capital transition, t >= 2
    eta = omega[:, 1:] - th["rho_omega"] * omega[:, :-1]
    out = out + np.sum(
        _log_phi(eta / np.sqrt(th["var_eta"])) - 0.5 * np.log(th["var_eta"]),
        axis=1,
    )
    k_mean = (
        th["rho_k0"]
        + th["rho_kk"] * panel.k[:, :-1]
        + th["rho_komega"] * omega[:, :-1]
    )
    k_res = panel.k[:, 1:] - k_mean
    out = out + np.sum(
        _log_phi(k_res / np.sqrt(th["var_k"])) - 0.5 * np.log(th["var_k"]),
        axis=1,
    )
    return out


def _logsumexp_rows(mat):
    """Row-wise log-sum-exp, shifting by the max of real parts."""
    shift = np.max(np.real(mat), axis=1, keepdims=True)
    return np.log(np.sum(np.exp(mat - shift), axis=1)) + shift[:, 0]


def loglik_matrices(panel, model_or_parts, wedge=None):
    """Per-firm, per-type (l1, l2) log densities as two (n, J) arrays."""
    if isinstance(model_or_parts, MixtureModel):
        model = model_or_parts
        thetas = _model_thetas(model)
        alpha = model.alpha_t
        wedge = model.price_wedge_t
    else:
        alpha, thetas = model_or_parts
        if wedge is None:
            wedge = np.zeros_like(alpha)
    l1 = np.stack([_l1_rows(panel, th, alpha) for th in thetas], axis=1)
    l2 = np.stack([_l2_rows(panel, th, wedge) for th in thetas], axis=1)
    return l1, l2


# ---------------------------------------------------------------------------
# public operations

def _validate_tp(tp: TypeParameters):
    if not isinstance(tp, TypeParameters):
        raise TypeError("expected TypeParameters")


def l1_contribution(panel, tp: TypeParameters, alpha) -> np.ndarray:
    """Static-block log density per firm under one type."""
    _validate_tp(tp)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (panel.T,):
        raise ValueError("alpha must have length T")
    return _l1_rows(panel, _theta_from_type(tp), alpha)


def l2_contribution(panel, tp: TypeParameters, beta_t) -> np.ndarray:
    """Dynamic-block log density per firm under one type.

    ``beta_t`` is the composite intercept vector; it is mapped back to
    the wedge consistent with this type's beta0_t.
    """
    _validate_tp(tp)
    beta_t = np.asarray(beta_t, dtype=float)
    if beta_t.shape != (panel.T,):
        raise ValueError("beta_t must have length T")
    wedge = tp.beta0_t + np.log(tp.beta_m) + 0.5 * tp.sigma_eps**2 - beta_t
    return _l2_rows(panel, _theta_from_type(tp), wedge)


def mixture_loglik(panel, model: MixtureModel) -> float:
    """Sum over firms of log sum_j pi_j exp(l1 + l2), stabilized."""
    if panel.n_firms == 0:
        raise ValueError("empty panel")
    l1, l2 = loglik_matrices(panel, model)
    q = _logsumexp_rows(np.log(model.pi)[None, :] + l1 + l2)
    return float(np.sum(q))


def penalty_variance(var, anchor_var, n) -> float:
    """Variance penalty -(1/n)(a/v - log(a/v)); diverges as v -> 0."""
    if np.real(var) <= 0.0 or anchor_var <= 0.0 or n < 1:
        raise ValueError("variance penalty needs positive arguments")
    ratio = anchor_var / var
    return -(ratio - np.log(ratio)) / n


def penalty_matrix(Sigma, anchor, n) -> float:
    """Covariance penalty -(1/n)(tr(A S^-1) - log det(A S^-1))."""
    Sigma = np.asarray(Sigma)
    anchor = np.asarray(anchor)
    det_s = Sigma[0, 0] * Sigma[1, 1] - Sigma[0, 1] * Sigma[1, 0]
    det_a = anchor[0, 0] * anchor[1, 1] - anchor[0, 1] * anchor[1, 0]
    if np.real(det_s) <= 0.0 or np.real(Sigma[0, 0]) <= 0.0:
        raise ValueError("Sigma must be positive definite")
    if det_a <= 0.0 or anchor[0, 0] <= 0.0 or n < 1:
        raise ValueError("anchor must be positive definite, n >= 1")
    # trace of A S^{-1} via the 2x2 adjugate
    tr = (
        anchor[0, 0] * Sigma[1, 1]
        - anchor[0, 1] * Sigma[1, 0]
        - anchor[1, 0] * Sigma[0, 1]
        + anchor[1, 1] * Sigma[0, 0]
    ) / det_s
    logdet = np.log(det_a) - np.log(det_s)
    return -(tr - logdet) / n


def _theta_penalty(th, anchors: PenaltyAnchors, n, stage: str):
    """Penalty terms of one type for the given stage."""
    Sigma_ez = np.array(
        [
            [th["var_eps"], th["rho"] * np.sqrt(th["var_eps"] * th["var_zeta"])],
            [th["rho"] * np.sqrt(th["var_eps"] * th["var_zeta"]), th["var_zeta"]],
        ]
    )
    Sigma1 = np.array([[th["S11"], th["S12"]], [th["S12"], th["S22"]]])
    total = 0.0
    if stage in ("stage1", "full"):
        total += penalty_variance(th["var_v"], anchors.var_v0, n)
        total += penalty_matrix(Sigma_ez, anchors.Sigma_epszeta0, n)
    if stage in ("stage2", "full"):
        total += penalty_variance(th["var_k"], anchors.var_k0, n)
        total += penalty_variance(th["var_eta"], anchors.var_eta0, n)
        total += penalty_matrix(Sigma1, anchors.Sigma1_0, n)
    return total


def penalized_objective(panel, model: MixtureModel, anchors: PenaltyAnchors) -> float:
    """Mixture log likelihood plus all Chen-Tan penalty terms."""
    total = mixture_loglik(panel, model)
    n = panel.n_firms
    for th in _model_thetas(model):
        total += np.real(_theta_penalty(th, anchors, n, "full"))
    return float(total)


# ---------------------------------------------------------------------------
# flat parameter vector for gradient checks and standard errors

def n_parameters(J: int, T: int) -> int:
    return (J - 1) + T + J * (19 + T)


def _thetas_to_vector(pi, alpha, thetas):
    J = len(thetas)
    parts = [np.asarray(pi[: J - 1]), np.asarray(alpha)]
    for th in thetas:
        parts.append(np.asarray([th[k] for k in _SCALAR_KEYS]))
        parts.append(np.asarray(th["beta0"]))
        parts.append(np.asarray([th["beta_k"]]))
        parts.append(np.asarray(th["mu1"]))
        parts.append(np.asarray([th[k] for k in _DYN_KEYS[1:]]))
    return np.concatenate(parts)


def _vector_to_thetas(vec, J, T):
    vec = np.asarray(vec)
    if vec.shape != (n_parameters(J, T),):
        raise ValueError(
            f"parameter vector has length {vec.shape[0]}, "
            f"expected {n_parameters(J, T)} for J={J}, T={T}"
        )
    pos = 0
    pi_head = vec[pos: pos + J - 1]
    pos += J - 1
    pi = np.concatenate([pi_head, np.atleast_1d(1.0 - np.sum(pi_head))])
    alpha = vec[pos: pos + T]
    pos += T
    thetas = []
    for _ in range(J):
        th = {}
        for key in _SCALAR_KEYS:
            th[key] = vec[pos]
            pos += 1
        th["beta0"] = vec[pos: pos + T]
        pos += T
        th["beta_k"] = vec[pos]
        pos += 1
        th["mu1"] = vec[pos: pos + 2]
        pos += 2
        for key in _DYN_KEYS[1:]:
            th[key] = vec[pos]
            pos += 1
        thetas.append(th)
    if pos != vec.shape[0]:
        raise ValueError("parameter vector has wrong length")
    return pi, alpha, thetas


def model_to_vector(model: MixtureModel) -> np.ndarray:
    return _thetas_to_vector(model.pi, model.alpha_t, _model_thetas(model))


def vector_to_model(vec, J, T, price_wedge_t=None) -> MixtureModel:
    pi, alpha, thetas = _vector_to_thetas(vec, J, T)
    return MixtureModel(
        pi=np.real(pi).astype(float),
        alpha_t=np.real(alpha).astype(float),
        types=tuple(_type_from_theta(th) for th in thetas),
        price_wedge_t=price_wedge_t,
    )


def objective_from_vector(vec, panel, anchors, J, T, wedge=None):
    """Penalized objective as a function of the flat vector.

    Works for complex-valued ``vec``; the imaginary parts flow through
    the whole computation.
    """
    pi, alpha, thetas = _vector_to_thetas(vec, J, T)
    if wedge is None:
        wedge = np.zeros(T)
    l1, l2 = loglik_matrices(panel, (alpha, thetas), wedge)
    q = _logsumexp_rows(np.log(pi)[None, :] + l1 + l2)
    total = np.sum(q)
    n = panel.n_firms
    for th in thetas:
        total = total + _theta_penalty(th, anchors, n, "full")
    return total


def _transform_indices(J, T):
    """Index sets for the unconstrained reparametrization."""
    base = (J - 1) + T
    log_idx, atanh_idx, chol_triples = [], [], []
    for j in range(J):
        off = base + j * (19 + T)
        log_idx += [off, off + 1, off + 3, off + 4, off + 6]
        atanh_idx.append(off + 5)
        log_idx += [off + 16 + T, off + 18 + T]
        chol_triples.append((off + 10 + T, off + 11 + T, off + 12 + T))
    return log_idx, atanh_idx, chol_triples


def vector_to_unconstrained(vec, J, T):
    """Map the packed vector to unconstrained coordinates.

    Mixing weights go through a multinomial logit, positive quantities
    through logs, the correlation through atanh, and Sigma1 through its
    Cholesky factor with logged diagonal.
    """
    u = np.array(vec, dtype=float)
    log_idx, atanh_idx, chol_triples = _transform_indices(J, T)
    head = u[: J - 1]
    u[: J - 1] = np.log(head) - np.log(1.0 - head.sum())
    u[log_idx] = np.log(u[log_idx])
    u[atanh_idx] = np.arctanh(u[atanh_idx])
    for i11, i12, i22 in chol_triples:
        l11 = np.sqrt(u[i11])
        l21 = u[i12] / l11
        l22 = np.sqrt(u[i22] - l21 * l21)
        u[i11], u[i12], u[i22] = np.log(l11), l21, np.log(l22)
    return u


def unconstrained_to_vector(u, J, T):
    """Inverse of :func:`vector_to_unconstrained`; complex-safe."""
    vec = np.array(u, copy=True)
    log_idx, atanh_idx, chol_triples = _transform_indices(J, T)
    head = np.exp(vec[: J - 1])
    vec[: J - 1] = head / (1.0 + head.sum())
    vec[log_idx] = np.exp(vec[log_idx])
    vec[atanh_idx] = np.tanh(vec[atanh_idx])
    for i11, i12, i22 in chol_triples:
        l11 = np.exp(vec[i11])
        l21 = vec[i12]
        l22 = np.exp(vec[i22])
        vec[i11] = l11 * l11
        vec[i12] = l11 * l21
        vec[i22] = l21 * l21 + l22 * l22
    return vec


def gradient_complex_step(vec, panel, anchors, J, T, h=1e-20):
    """Machine-precision gradient via complex-step differentiation."""
    vec = np.asarray(vec, dtype=float)
    grad = np.empty_like(vec)
    for idx in range(vec.shape[0]):
        z = vec.astype(complex)
        z[idx] += 1j * h
        grad[idx] = np.imag(objective_from_vector(z, panel, anchors, J, T)) / h
    return grad


def gradient_central_fd(vec, panel, anchors, J, T, h=1e-6):
    """Central finite-difference gradient (reference implementation)."""
    vec = np.asarray(vec, dtype=float)
    grad = np.empty_like(vec)
    for idx in range(vec.shape[0]):
        up = vec.copy()
        dn = vec.copy()
        up[idx] += h
        dn[idx] -= h
        f_up = objective_from_vector(up, panel, anchors, J, T)
        f_dn = objective_from_vector(dn, panel, anchors, J, T)
        grad[idx] = (f_up - f_dn) / (2.0 * h)
    return grad
