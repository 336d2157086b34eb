"""Closed-form maps from observables to structural shocks.

Under a hypothesized type, the static first-order conditions invert to
eps, zeta, v, and the output equation inverts to omega; eta is the
AR(1) innovation of omega. All maps are linear in the data and work
elementwise on arrays. They also accept complex-valued parameters so
that step-differentiation of the likelihood stays exact.
"""

from __future__ import annotations

import numpy as np

from .model import MixtureModel, TypeParameters

__all__ = [
    "flexible_residuals",
    "omega_recover",
    "eta_recover",
    "residual_panel",
]


def _check_finite(*vals):
    for v in vals:
        arr = np.asarray(v)
        if not np.issubdtype(arr.dtype, np.complexfloating):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite input to residual map")


def flexible_residuals(sm, sl, ltilde_minus_m, tp: TypeParameters, alpha_t):
    """Invert the share and wage-bill equations to (eps, zeta, v).

    ``ltilde_minus_m`` is ltilde - m; ``alpha_t`` is the period's log
    price ratio ln(P_L/P_M). Inputs broadcast elementwise.
    """
    _check_finite(sm, sl, ltilde_minus_m, alpha_t)
    eps = -np.asarray(sm) + np.log(tp.beta_m) + 0.5 * tp.sigma_eps**2
    zeta = (
        np.asarray(sl) - np.asarray(sm)
        - np.log(tp.beta_l / tp.beta_m)
        + 0.5 * tp.sigma_zeta**2
    )
    v = -(
        np.asarray(ltilde_minus_m)
        + np.asarray(alpha_t)
        + np.log(tp.beta_m / tp.beta_l)
        + 0.5 * tp.sigma_zeta**2
        + tp.psi
    )
    return eps, zeta, v


def omega_recover(m, ltilde_minus_m, k, tp: TypeParameters, beta_t):
    """Invert the output equation to omega.

    ``beta_t`` is the composite intercept (see MixtureModel.beta_t);
    requires beta_m + beta_l < 1 so the inversion has positive slope.
    """
    if tp.beta_m + tp.beta_l >= 1.0:
        raise ValueError("beta_m + beta_l must be < 1 to recover omega")
    _check_finite(m, ltilde_minus_m, k, beta_t)
    return (
        (1.0 - tp.beta_m - tp.beta_l) * np.asarray(m)
        - tp.beta_l * tp.psi
        - np.asarray(beta_t)
        - tp.beta_l * np.asarray(ltilde_minus_m)
        - tp.beta_k * np.asarray(k)
    )


def eta_recover(omega_t, omega_tm1, rho_omega):
    """AR(1) innovation: omega_t - rho_omega * omega_{t-1}."""
    return np.asarray(omega_t) - rho_omega * np.asarray(omega_tm1)


def residual_panel(panel, model: MixtureModel, j: int):
    """All recovered shocks for every firm-year under type ``j``.

    Returns a dict of (n_firms, T) arrays for eps, zeta, v, omega and
    an (n_firms, T-1) array for eta.
    """
    tp = model.types[j]
    lm = panel.ltilde - panel.m
    eps, zeta, v = flexible_residuals(
        panel.sm, panel.sl, lm, tp, model.alpha_t[None, :]
    )
    omega = omega_recover(panel.m, lm, panel.k, tp, model.beta_t(j)[None, :])
    eta = eta_recover(omega[:, 1:], omega[:, :-1], tp.rho_omega)
    return {"eps": eps, "zeta": zeta, "v": v, "omega": omega, "eta": eta}
