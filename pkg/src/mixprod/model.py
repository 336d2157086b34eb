"""Core domain types: per-type structural parameters and the mixture model.

A latent type bundles a Cobb-Douglas technology (``beta_m``, ``beta_l``,
``beta_k``, time intercepts ``beta0_t``), a labor-quality shift ``psi``,
the distributions of the static shocks (eps, zeta, v), the AR(1)
productivity process (``rho_omega``, ``sigma_eta``), the reduced-form
capital transition and the initial (k, omega) distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

__all__ = [
    "TypeParameters",
    "MixtureModel",
    "InvalidParameterError",
    "derived_summaries",
]


class InvalidParameterError(ValueError):
    """Raised when structural parameters violate a model restriction."""


def _as_float_array(x, name: str, shape=None) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if shape is not None and arr.shape != shape:
        raise InvalidParameterError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class TypeParameters:
    """All structural parameters of one latent type."""

    beta_m: float
    beta_l: float
    beta_k: float
    beta0_t: np.ndarray          # length T, time-varying intercepts
    psi: float
    sigma_eps: float
    sigma_zeta: float
    rho_epszeta: float
    sigma_v: float
    rho_omega: float
    sigma_eta: float
    rho_k0: float
    rho_kk: float
    rho_komega: float
    sigma_k: float
    mu1: np.ndarray              # mean of (k_1, omega_1)
    Sigma1: np.ndarray           # 2x2 covariance of (k_1, omega_1)

    def __post_init__(self):
        object.__setattr__(self, "beta0_t", _as_float_array(self.beta0_t, "beta0_t"))
        object.__setattr__(self, "mu1", _as_float_array(self.mu1, "mu1", (2,)))
        object.__setattr__(self, "Sigma1", _as_float_array(self.Sigma1, "Sigma1", (2, 2)))
        for name in ("beta_m", "beta_l", "beta_k"):
            val = getattr(self, name)
            if not (0.0 < val < 1.0):
                raise InvalidParameterError(f"{name} must lie in (0, 1), got {val}")
        if self.beta_m + self.beta_l >= 1.0:
            raise InvalidParameterError(
                f"beta_m + beta_l = {self.beta_m + self.beta_l} must be < 1"
            )
        for name in ("sigma_eps", "sigma_zeta", "sigma_v", "sigma_eta", "sigma_k"):
            val = getattr(self, name)
            if not val > 0.0:
                raise InvalidParameterError(f"{name} must be strictly positive, got {val}")
        if not abs(self.rho_epszeta) < 1.0:
            raise InvalidParameterError(f"|rho_epszeta| must be < 1, got {self.rho_epszeta}")
        s = self.Sigma1
        if not np.allclose(s, s.T):
            raise InvalidParameterError("Sigma1 must be symmetric")
        if np.linalg.det(s) <= 0.0 or s[0, 0] <= 0.0:
            raise InvalidParameterError("Sigma1 must be positive definite")

    @property
    def T(self) -> int:
        return self.beta0_t.shape[0]

    @property
    def Sigma_epszeta(self) -> np.ndarray:
        """2x2 covariance of (eps, zeta)."""
        cross = self.rho_epszeta * self.sigma_eps * self.sigma_zeta
        return np.array(
            [[self.sigma_eps**2, cross], [cross, self.sigma_zeta**2]]
        )

    def replace(self, **changes) -> "TypeParameters":
        return replace(self, **changes)


@dataclass(frozen=True)
class MixtureModel:
    """Mixing weights, shared price-ratio intercepts and J latent types."""

    pi: np.ndarray               # length J, mixing probabilities
    alpha_t: np.ndarray          # length T, log(P_L / P_M)
    types: tuple                 # J TypeParameters
    price_wedge_t: np.ndarray = None  # length T, log(P_M / P_Y); defaults to 0

    def __post_init__(self):
        object.__setattr__(self, "pi", _as_float_array(self.pi, "pi"))
        object.__setattr__(self, "alpha_t", _as_float_array(self.alpha_t, "alpha_t"))
        object.__setattr__(self, "types", tuple(self.types))
        if self.price_wedge_t is None:
            object.__setattr__(
                self, "price_wedge_t", np.zeros_like(self.alpha_t)
            )
        else:
            object.__setattr__(
                self,
                "price_wedge_t",
                _as_float_array(self.price_wedge_t, "price_wedge_t", self.alpha_t.shape),
            )
        if len(self.types) != self.pi.shape[0]:
            raise InvalidParameterError("pi length must equal number of types")
        if np.any(self.pi < 0.0) or abs(self.pi.sum() - 1.0) > 1e-12:
            raise InvalidParameterError("pi entries must be nonnegative and sum to 1")
        T = self.alpha_t.shape[0]
        for j, tp in enumerate(self.types):
            if not isinstance(tp, TypeParameters):
                raise InvalidParameterError(f"types[{j}] is not a TypeParameters")
            if tp.T != T:
                raise InvalidParameterError(
                    f"types[{j}] has T={tp.T}, expected {T}"
                )

    @property
    def J(self) -> int:
        return len(self.types)

    @property
    def T(self) -> int:
        return self.alpha_t.shape[0]

    def beta_t(self, j: int) -> np.ndarray:
        """Composite intercept entering the productivity inversion.

        beta_t = beta0_t + log(beta_m) + 0.5 sigma_eps^2 - log(P_M/P_Y),
        the unique composition under which omega recovered from
        (m, ltilde - m, k) agrees with the omega entering the production
        equation, given s^m = log(beta_m) + 0.5 sigma_eps^2 - eps and
        s^m = log(P_M/P_Y) + m - y.
        """
        tp = self.types[j]
        return (
            tp.beta0_t
            + np.log(tp.beta_m)
            + 0.5 * tp.sigma_eps**2
            - self.price_wedge_t
        )

    def permuted(self, order: Sequence[int]) -> "MixtureModel":
        """Relabel the types according to ``order``."""
        order = list(order)
        return MixtureModel(
            pi=self.pi[order],
            alpha_t=self.alpha_t,
            types=tuple(self.types[j] for j in order),
            price_wedge_t=self.price_wedge_t,
        )


def derived_summaries(tp: TypeParameters) -> tuple[float, float]:
    """Returns-to-scale and capital/labor elasticity ratio for one type."""
    if tp.beta_l == 0.0:
        raise ZeroDivisionError("beta_l must be nonzero for the k/l ratio")
    rts = tp.beta_m + tp.beta_l + tp.beta_k
    return rts, tp.beta_k / tp.beta_l
