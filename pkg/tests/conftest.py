import numpy as np
import pytest

from mixprod import (
    DiscreteMixturePanel,
    MixtureModel,
    SimConfig,
    TypeParameters,
    simulate_panel,
)


def make_discrete_system(J, S, seed, hub_mass=0.8, tilt=0.3,
                         block_mass=0.75, jitter=0.1):
    """Random latent-type Markov system with concentrated middle
    periods and separated ends.

    All types push periods 2 and 3 through the same J hub states, so
    the evaluation cells carry a lot of mass; the types differ mildly
    in their hub weights (eigenvalue separation) and strongly in their
    period-1 and period-4 profiles (matrix invertibility).
    """
    rng = np.random.default_rng(seed)
    pi = rng.dirichlet(np.full(J, 30.0))
    hubs = np.arange(J)
    edges = np.linspace(0, S, J + 1).astype(int)

    def hub_row(j, origin=0):
        # type j prefers moving from hub h to hub h + j (cyclically),
        # so the interaction of origin and destination separates types
        r = np.full(S, (1.0 - hub_mass) / S)
        w = np.ones(J)
        if J > 1:
            w = 1.0 + tilt * np.cos(
                2 * np.pi * (np.arange(J) - origin - j) / J)
        r[hubs] += hub_mass * w / w.sum()
        r = r * (1.0 + jitter * rng.random(S))
        return r / r.sum()

    def block_row(j):
        r = np.full(S, (1.0 - block_mass) / S)
        width = edges[j + 1] - edges[j]
        r[edges[j]:edges[j + 1]] += block_mass / width
        r = r * (1.0 + jitter * rng.random(S))
        return r / r.sum()

    g1 = np.vstack([block_row(j) for j in range(J)])
    g2 = np.stack([np.vstack([hub_row(j) for _ in range(S)])
                   for j in range(J)])
    g3 = np.stack([np.vstack([hub_row(j, origin=z2 % J)
                              for z2 in range(S)])
                   for j in range(J)])
    g4 = np.stack([np.vstack([block_row(j) for _ in range(S)])
                   for j in range(J)])
    return DiscreteMixturePanel(support=np.arange(S, dtype=float),
                                pi=pi, g1=g1,
                                kernels={2: g2, 3: g3, 4: g4})


def make_type(beta_m=0.33, beta_l=0.22, beta_k=0.12, rho_omega=0.85,
              sigma_eta=0.13, T=4, **overrides):
    base = dict(
        beta_m=beta_m, beta_l=beta_l, beta_k=beta_k,
        beta0_t=np.zeros(T), psi=0.0, sigma_eps=0.15, sigma_zeta=0.15,
        rho_epszeta=0.3, sigma_v=0.25, rho_omega=rho_omega,
        sigma_eta=sigma_eta, rho_k0=0.3, rho_kk=0.9, rho_komega=0.3,
        sigma_k=0.2, mu1=np.array([2.0, 0.0]),
        Sigma1=np.array([
            [0.5, 0.1], [0.1, sigma_eta**2 / (1.0 - rho_omega**2)]
        ]),
    )
    base.update(overrides)
    return TypeParameters(**base)


def make_two_type_model(T=4):
    """Two types with the elasticity profile used throughout the tests."""
    return MixtureModel(
        pi=np.array([0.5, 0.5]),
        alpha_t=np.zeros(T),
        types=(
            make_type(0.287, 0.263, 0.147, 0.834, 0.137, T=T),
            make_type(0.394, 0.186, 0.103, 0.877, 0.114, T=T),
        ),
    )


def make_one_type_model(T=4, **overrides):
    return MixtureModel(
        pi=np.array([1.0]), alpha_t=np.zeros(T),
        types=(make_type(T=T, **overrides),),
    )


@pytest.fixture(scope="session")
def small_panel():
    """J=1 panel for quick likelihood and estimator tests."""
    model = make_one_type_model()
    return simulate_panel(
        SimConfig(n_firms=300, T=4, model=model, seed=42)
    ), model


@pytest.fixture(scope="session")
def two_type_panel():
    model = make_two_type_model()
    return simulate_panel(
        SimConfig(n_firms=1000, T=4, model=model, seed=7)
    ), model
