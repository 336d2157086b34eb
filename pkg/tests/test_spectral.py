import itertools

import numpy as np
import pytest

from mixprod import (
    DiscreteMixturePanel,
    RecoveredSystem,
    RecoveryConfig,
    SpectralError,
    align_permutations,
    build_Q,
    check_rank_conditions,
    discretize_panel,
    eigen_recover,
    empirical_joint,
    joint_from_system,
    match_to_truth,
    recover_system,
    recover_wage_and_psi,
    sample_joint,
    select_points,
)

from conftest import make_discrete_system


def tiny_system():
    """Hand-sized J=2, S=3 system with strictly positive kernels."""
    g2 = np.array([
        [[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.3, 0.2, 0.5]],
        [[0.1, 0.6, 0.3], [0.4, 0.2, 0.4], [0.25, 0.5, 0.25]],
    ])
    g3 = np.array([
        [[0.6, 0.2, 0.2], [0.25, 0.5, 0.25], [0.2, 0.3, 0.5]],
        [[0.2, 0.2, 0.6], [0.5, 0.3, 0.2], [0.3, 0.5, 0.2]],
    ])
    g4 = np.array([
        [[0.7, 0.2, 0.1], [0.1, 0.7, 0.2], [0.2, 0.1, 0.7]],
        [[0.1, 0.3, 0.6], [0.6, 0.1, 0.3], [0.3, 0.6, 0.1]],
    ])
    return DiscreteMixturePanel(
        support=np.array([0.0, 1.0, 2.0]),
        pi=np.array([0.4, 0.6]),
        g1=np.array([[0.6, 0.3, 0.1], [0.1, 0.3, 0.6]]),
        kernels={2: g2, 3: g3, 4: g4},
    )


class TestSystemContainer:
    def test_validates_shapes_and_masses(self):
        sys0 = tiny_system()
        with pytest.raises(ValueError):
            DiscreteMixturePanel(
                support=sys0.support, pi=np.array([0.5, 0.6]),
                g1=sys0.g1, kernels=sys0.kernels,
            )
        bad = {t: sys0.kernels[t].copy() for t in (2, 3, 4)}
        bad[3][0, 0, 0] = 0.0
        bad[3][0, 0, 1] += sys0.kernels[3][0, 0, 0]
        with pytest.raises(ValueError, match="t=3"):
            DiscreteMixturePanel(
                support=sys0.support, pi=sys0.pi, g1=sys0.g1, kernels=bad,
            )

    def test_permuted_round_trip(self):
        sys0 = tiny_system()
        back = sys0.permuted([1, 0]).permuted([1, 0])
        assert np.allclose(back.pi, sys0.pi)
        assert np.allclose(back.kernels[3], sys0.kernels[3])

    def test_json_round_trip(self, tmp_path):
        sys0 = tiny_system()
        path = tmp_path / "sys.json"
        sys0.save_json(path)
        back = DiscreteMixturePanel.load_json(path)
        assert np.allclose(back.g1, sys0.g1)
        assert np.allclose(back.kernels[4], sys0.kernels[4])


class TestForwardModel:
    def test_joint_matches_brute_force(self):
        sys0 = tiny_system()
        joint = joint_from_system(sys0)
        S = sys0.S
        brute = np.zeros((S, S, S, S))
        for j in range(sys0.J):
            for a, b, c, d in itertools.product(range(S), repeat=4):
                brute[a, b, c, d] += (
                    sys0.pi[j] * sys0.g1[j, a] * sys0.kernels[2][j, a, b]
                    * sys0.kernels[3][j, b, c] * sys0.kernels[4][j, c, d]
                )
        assert np.allclose(joint, brute, atol=1e-15)
        assert joint.sum() == pytest.approx(1.0)

    def test_sampling_deterministic_and_consistent(self):
        joint = joint_from_system(tiny_system())
        a = sample_joint(joint, 50000, seed=1)
        assert np.array_equal(a, sample_joint(joint, 50000, seed=1))
        assert a.sum() == pytest.approx(1.0)
        assert np.max(np.abs(a - joint)) < 0.01


class TestEvaluationMatrices:
    def test_entries_are_marginals_and_joints(self):
        joint = joint_from_system(tiny_system())
        Q = build_Q(joint, [0, 2], [1, 2], z2=1, z3=0)
        assert Q.shape == (3, 2)
        assert Q[0, 0] == pytest.approx(joint[0, 1, 0, :].sum())
        assert Q[0, 1] == pytest.approx(joint[2, 1, 0, :].sum())
        assert Q[1, 0] == pytest.approx(joint[0, 1, 0, 1])
        assert Q[2, 1] == pytest.approx(joint[2, 1, 0, 2])

    def test_grouped_points_sum_rows(self):
        joint = joint_from_system(tiny_system())
        single = build_Q(joint, [0, 1, 2], [0, 1, 2], z2=0, z3=1)
        grouped = build_Q(joint, [[0, 1], [2]], [[0, 2]], z2=0, z3=1)
        assert grouped[0, 0] == pytest.approx(single[0, 0] + single[0, 1])
        assert grouped[1, 1] == pytest.approx(single[1, 2] + single[3, 2])

    def test_rejects_repeated_points(self):
        joint = joint_from_system(tiny_system())
        with pytest.raises(ValueError):
            build_Q(joint, [0, 0], [1, 2], z2=0, z3=0)


class TestEigenRecovery:
    def test_eigenvalues_are_kernel_ratio_products(self):
        # the slice transform's structural eigenvalues are the per-type
        # ratio-of-ratios of the middle transition kernel
        sys0 = tiny_system()
        joint = joint_from_system(sys0)
        z2c, z2b, z3, z3b = 0, 1, 2, 0
        g3 = sys0.kernels[3]
        expected = (g3[:, z2c, z3] / g3[:, z2c, z3b]
                    * g3[:, z2b, z3b] / g3[:, z2b, z3])
        _, eigvals = eigen_recover(
            joint, [0, 1, 2], [0, 1, 2], 2, (z2c, z2b), z3, z3b,
        )
        assert np.allclose(np.sort(eigvals), np.sort(expected), atol=1e-10)

    def test_identical_types_rejected(self):
        sys0 = tiny_system()
        twin = DiscreteMixturePanel(
            support=sys0.support, pi=np.array([0.5, 0.5]),
            g1=np.vstack([sys0.g1[0], sys0.g1[0]]),
            kernels={t: np.stack([sys0.kernels[t][0]] * 2)
                     for t in (2, 3, 4)},
        )
        joint = joint_from_system(twin)
        with pytest.raises(SpectralError):
            eigen_recover(joint, [0, 1, 2], [0, 1, 2], 2, (0, 1), 2, 0)


class TestAlignment:
    def test_exact_permutation_recovered(self):
        L_ref = np.array([[1.0, 1.0], [2.0, 5.0]])
        P = np.array([[0.0, 1.0], [1.0, 0.0]])
        Lt = L_ref @ P
        # cross-slice transform consistent with the swapped ordering,
        # including an arbitrary per-type rescaling
        D = np.diag([0.7, 1.3])
        A = Lt @ D @ P @ np.linalg.inv(L_ref)
        L_stars, perms = align_permutations(
            {0: L_ref, 1: Lt}, {0: np.eye(2), 1: A}, z3_star=0,
        )
        assert np.allclose(L_stars[1], L_ref)
        assert perms[0].tolist() == [0, 1]
        assert perms[1].tolist() == [1, 0]


class TestExactRecovery:
    @pytest.mark.parametrize("J,S,seed", [(1, 4, 0), (2, 5, 11), (3, 6, 5)])
    def test_recovers_truth(self, J, S, seed):
        truth = make_discrete_system(J, S, seed)
        rec = recover_system(joint_from_system(truth), J)
        _, errs = match_to_truth(truth, rec)
        assert max(errs.values()) < 1e-6

    def test_permutation_common_across_slices(self):
        truth = make_discrete_system(2, 5, 11)
        rec = recover_system(joint_from_system(truth), 2)
        assert np.all(rec.permutation == rec.permutation[0])

    def test_explicit_config_matches_default(self):
        truth = make_discrete_system(2, 4, 3)
        joint = joint_from_system(truth)
        cfg = select_points(joint, 2)
        assert cfg.z3_star is not None
        a = recover_system(joint, 2)
        b = recover_system(joint, 2, cfg)
        assert np.allclose(a.pi_hat, b.pi_hat, atol=1e-10)


class TestSampledRecovery:
    def test_error_shrinks_with_sample_size(self):
        truth = make_discrete_system(2, 4, 3)
        joint = joint_from_system(truth)
        errs = []
        for n in (50_000, 200_000, 800_000):
            emp = sample_joint(joint, n, seed=99)
            rec = recover_system(emp, 2, RecoveryConfig(neg_tol=1.0))
            _, e = match_to_truth(truth, rec)
            errs.append(e["pi"])
        assert errs[-1] < errs[0]
        assert errs[-1] < 0.01


class TestRankConditions:
    def test_well_separated_system_passes(self):
        truth = make_discrete_system(2, 5, 11)
        cfg = select_points(joint_from_system(truth), 2)
        z2c, z2b, zb = cfg.z3_bar[cfg.z3_star]
        report = check_rank_conditions(
            truth, cfg.a_points, cfg.b_points, (z2c, z2b),
            cfg.z3_star, zb, cfg.z3_star,
        )
        assert report["ok"]
        assert report["min_eigen_gap"] > 0

    def test_identical_types_fail(self):
        sys0 = tiny_system()
        twin = DiscreteMixturePanel(
            support=sys0.support, pi=np.array([0.5, 0.5]),
            g1=np.vstack([sys0.g1[0], sys0.g1[0]]),
            kernels={t: np.stack([sys0.kernels[t][0]] * 2)
                     for t in (2, 3, 4)},
        )
        report = check_rank_conditions(
            twin, [0, 1, 2], [0, 1, 2], (0, 1), 2, 0, 2,
        )
        assert not report["ok"]
        assert report["singular_L_z3"]

    def test_duplicated_points_reported_singular(self):
        # with three types, two duplicated destination points leave the
        # destination matrices with only two independent rows
        truth = make_discrete_system(3, 6, 5)
        report = check_rank_conditions(
            truth, [0, 2, 4], [0, 0], (0, 1), 2, 0, 2,
        )
        assert report["singular_L_z3"]
        assert not report["ok"]


class TestWageRecovery:
    def test_arithmetic_oracle(self):
        # two types with mean log wage bills log 1 and log 3 at equal
        # weights: the wage level is 2 and quality shifts renormalize
        pl, psi = recover_wage_and_psi(
            np.array([0.5, 0.5]), np.log([1.0, 3.0])
        )
        assert pl == pytest.approx(2.0)
        assert psi == pytest.approx([-np.log(2.0), np.log(1.5)])
        assert np.sum(0.5 * np.exp(psi)) == pytest.approx(1.0)

    def test_leading_period_axes(self):
        e = np.log(np.array([[1.0, 3.0], [2.0, 2.0]]))
        pl, psi = recover_wage_and_psi(np.array([0.5, 0.5]), e)
        assert pl == pytest.approx([2.0, 2.0])
        assert psi.shape == (2, 2)

    def test_rejects_mismatched_lengths(self):
        with pytest.raises(ValueError):
            recover_wage_and_psi(np.array([1.0]), np.zeros(2))


class TestDiscretization:
    def test_scalar_quantile_bins(self):
        values = np.arange(12.0).reshape(3, 4)
        states, edges = discretize_panel(values, n_bins=3)
        assert states.shape == (3, 4)
        assert len(edges) == 1 and len(edges[0]) == 2
        assert states.min() == 0 and states.max() == 2
        # pooled quantiles split 0..11 into thirds
        assert np.all(states.ravel() == np.repeat([0, 1, 2], 4))

    def test_vector_composite_states(self):
        rng = np.random.default_rng(0)
        values = rng.standard_normal((200, 4, 2))
        states, edges = discretize_panel(values, n_bins=3)
        assert states.min() >= 0 and states.max() < 9
        assert len(edges) == 2

    def test_empirical_joint_counts(self):
        states = np.array([[0, 1, 1, 0], [0, 1, 1, 0], [1, 0, 0, 1]])
        joint = empirical_joint(states, 2)
        assert joint[0, 1, 1, 0] == pytest.approx(2 / 3)
        assert joint[1, 0, 0, 1] == pytest.approx(1 / 3)
        assert joint.sum() == pytest.approx(1.0)
        with pytest.raises(ValueError):
            empirical_joint(states[:, :3], 2)
