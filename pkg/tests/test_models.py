import pytest
import numpy as np
import sympy as sp
from unittest.mock import patch
import sys
import os

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '../src'))

from errors import DomainError, GenerationError, InputError  # noqa: E402
from models import (  # noqa: E402
    GaussianSem, ModelSpec, generate, random_sem, sem_counterfactual_mean, sem_counterfactual_variance,
    sem_observational_slope, sem_simulate, true_factors,
)
from probability import check_mutual_independence, joint_table  # noqa: E402
from structures import Structure, structure_info  # noqa: E402
from tensor import condition_number  # noqa: E402

FIG3_BINARY = {'U': 2, 'Z': 2, 'W': 2, 'A': 2, 'Y': 2}


class TestModelSpec:
    """Test cases for ModelSpec generator settings"""

    def test_structure_is_parsed(self):
        """Test the structure field accepts its string value"""
        spec = ModelSpec('fig3', FIG3_BINARY, 7)
        assert spec.structure is Structure.FIG3_KP
        assert spec.info.has_bridge

    def test_cardinalities_must_cover_variables(self):
        """Test missing and extra variables"""
        with pytest.raises(DomainError):
            ModelSpec('fig3', {'U': 2, 'Z': 2, 'W': 2, 'A': 2}, 0)
        with pytest.raises(DomainError):
            ModelSpec('fig3', dict(FIG3_BINARY, Q=2), 0)

    def test_cardinality_positive(self):
        """Test zero cardinalities are rejected"""
        with pytest.raises(DomainError):
            ModelSpec('fig3', dict(FIG3_BINARY, W=0), 0)

    @pytest.mark.parametrize("seed", [-1, 2 ** 64])
    def test_seed_range(self, seed):
        """Test seeds outside the unsigned 64-bit range"""
        with pytest.raises(DomainError):
            ModelSpec('fig3', FIG3_BINARY, seed)

    def test_largest_seed_allowed(self):
        """Test the top of the seed range"""
        assert ModelSpec('fig3', FIG3_BINARY, 2 ** 64 - 1).seed == 2 ** 64 - 1

    def test_unknown_constraint(self):
        """Test unknown constraint flags"""
        with pytest.raises(DomainError):
            ModelSpec('fig3', FIG3_BINARY, 0, ('force_magic',))

    def test_constraint_needs_proxy_structure(self):
        """Test constraints on a structure without proxies"""
        with pytest.raises(DomainError):
            ModelSpec('fig1', {'C': 2, 'A': 2, 'Y': 2}, 0, ('force_invertible',))

    def test_bridge_constraint_needs_bridge(self):
        """Test force_bridge_solvable on the three-proxy structure"""
        with pytest.raises(DomainError):
            ModelSpec('fig4', {'L': 2, 'W': 2, 'Z': 2, 'Y': 2}, 0, ('force_bridge_solvable',))

    def test_constraints_are_sorted_and_deduplicated(self):
        """Test canonical constraint order"""
        spec = ModelSpec('fig3', FIG3_BINARY, 0, ('force_kruskal', 'force_invertible', 'force_kruskal'))
        assert spec.constraints == ('force_invertible', 'force_kruskal')

    def test_dict_round_trip(self):
        """Test to_dict/from_dict"""
        spec = ModelSpec('fig2', FIG3_BINARY, 11, ('force_invertible',), include_optional_edges=False)
        data = spec.to_dict()
        assert data['structure'] == 'fig2'
        assert ModelSpec.from_dict(data) == spec

    def test_from_dict_missing_key(self):
        """Test malformed spec JSON"""
        with pytest.raises(InputError):
            ModelSpec.from_dict({'structure': 'fig3', 'seed': 0})


class TestGenerate:
    """Test cases for the random law generator"""

    def test_deterministic_in_seed(self):
        """Test identical specs give bit-identical laws"""
        first = generate(ModelSpec('fig3', FIG3_BINARY, 42))
        second = generate(ModelSpec('fig3', FIG3_BINARY, 42))
        assert np.array_equal(first.probabilities, second.probabilities)
        assert first.fingerprint() == second.fingerprint()

    def test_seed_changes_law(self):
        """Test different seeds give different laws"""
        first = generate(ModelSpec('fig3', FIG3_BINARY, 1))
        second = generate(ModelSpec('fig3', FIG3_BINARY, 2))
        assert not np.array_equal(first.probabilities, second.probabilities)

    def test_law_layout(self):
        """Test variable order, labels and DAG"""
        law = generate(ModelSpec('fig3', {'U': 3, 'Z': 2, 'W': 3, 'A': 2, 'Y': 4}, 5))
        assert law.names == ['U', 'Z', 'W', 'A', 'Y']
        assert law.shape == (3, 2, 3, 2, 4)
        assert law.domain('Y').labels == ('y0', 'y1', 'y2', 'y3')
        assert ('Z', 'A') in law.dag
        assert law.probabilities.sum() == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("structure,cards", [
        ('fig2', {'U': 2, 'Z': 3, 'W': 2, 'A': 2, 'Y': 3}),
        ('fig3', {'U': 3, 'Z': 3, 'W': 3, 'A': 2, 'Y': 2}),
        ('fig4', {'L': 2, 'W': 3, 'Z': 2, 'Y': 2}),
        ('figa1', {'U': 2, 'A': 2, 'M': 3, 'Y': 2}),
        ('figa3', {'U': 2, 'A': 2, 'M': 2, 'Z': 2, 'W': 2, 'Y': 2}),
    ])
    def test_generated_laws_satisfy_markov_statements(self, structure, cards):
        """Test every generated law factorizes along its structure"""
        law = generate(ModelSpec(structure, cards, 3))
        for statement in structure_info(structure).markov:
            assert check_mutual_independence(law, statement.groups, statement.given, tol=1e-12), statement.name

    def test_fig2_without_optional_edges(self):
        """Test dropping optional edges removes them from the DAG"""
        law = generate(ModelSpec('fig2', FIG3_BINARY, 9, include_optional_edges=False))
        assert ('Z', 'A') not in law.dag
        assert ('W', 'Y') not in law.dag
        # Z _||_ A | U once Z -> A is gone
        assert check_mutual_independence(law, ['Z', 'A'], ['U'], tol=1e-12)

    def test_force_invertible(self):
        """Test invertible proxy matrices within the generator's conditioning cap"""
        spec = ModelSpec('fig3', {'U': 3, 'Z': 3, 'W': 3, 'A': 2, 'Y': 3}, 17, ('force_invertible',))
        factors = true_factors(generate(spec), spec.info)
        assert condition_number(factors.p_w_given_u) <= 1e3
        for matrix in factors.p_z_given_ua.values():
            assert condition_number(matrix) <= 1e3

    def test_force_invertible_mismatched_cardinalities(self):
        """Test square proxies are required up front"""
        spec = ModelSpec('fig3', {'U': 2, 'Z': 3, 'W': 2, 'A': 2, 'Y': 2}, 0, ('force_invertible',))
        with pytest.raises(GenerationError) as exc:
            generate(spec)
        assert exc.value.details['constraint'] == 'force_invertible'

    def test_force_monotone_proxy(self):
        """Test the W mean is increasing in the latent index"""
        spec = ModelSpec('fig3', {'U': 3, 'Z': 3, 'W': 4, 'A': 2, 'Y': 2}, 23, ('force_monotone_proxy',))
        factors = true_factors(generate(spec), spec.info)
        means = np.arange(4) @ factors.p_w_given_u
        assert np.all(np.diff(means) > 0)

    def test_shared_outcome_columns(self):
        """Test P(Y | U, a) does not depend on U"""
        spec = ModelSpec('fig3', FIG3_BINARY, 4, shared_outcome_columns=True)
        factors = true_factors(generate(spec), spec.info)
        for matrix in factors.p_y_given_ua.values():
            np.testing.assert_allclose(matrix[:, 0], matrix[:, 1], atol=1e-12)

    @patch('models.GENERATOR_MAX_RETRIES', 5)
    def test_unsatisfiable_constraint(self):
        """Test binary proxies cannot meet Kruskal's condition for three latent states"""
        spec = ModelSpec('fig3', {'U': 3, 'Z': 2, 'W': 2, 'A': 2, 'Y': 2}, 0, ('force_kruskal',))
        with pytest.raises(GenerationError) as exc:
            generate(spec)
        assert exc.value.details['constraint'] == 'force_kruskal'
        assert exc.value.details['failures'] == {'force_kruskal': 5}

    def test_single_state_variable(self):
        """Test a cardinality-one variable gets a degenerate factor"""
        law = generate(ModelSpec('fig1', {'C': 1, 'A': 2, 'Y': 2}, 0))
        assert joint_table(law, ['C']).tolist() == pytest.approx([1.0])


class TestTrueFactors:
    """Test cases for reading true factors off a latent-visible law"""

    def test_columns_are_distributions(self):
        """Test every factor matrix is column stochastic"""
        spec = ModelSpec('fig3', {'U': 3, 'Z': 3, 'W': 2, 'A': 2, 'Y': 4}, 8)
        factors = true_factors(generate(spec), spec.info)
        assert factors.levels == ['a0', 'a1']
        np.testing.assert_allclose(factors.p_w_given_u.sum(axis=0), 1.0)
        for level in factors.levels:
            np.testing.assert_allclose(factors.p_z_given_ua[level].sum(axis=0), 1.0)
            np.testing.assert_allclose(factors.p_y_given_ua[level].sum(axis=0), 1.0)
            assert factors.f_u_given_a[level].sum() == pytest.approx(1.0)

    def test_no_treatment_context(self):
        """Test the three-proxy structure has a single context"""
        spec = ModelSpec('fig4', {'L': 2, 'W': 2, 'Z': 2, 'Y': 2}, 1)
        factors = true_factors(generate(spec), spec.info)
        assert factors.levels == ['*']
        assert factors.latent == 'L'

    def test_structure_without_roles(self):
        """Test structures without proxies"""
        spec = ModelSpec('fig1', {'C': 2, 'A': 2, 'Y': 2}, 0)
        with pytest.raises(DomainError):
            true_factors(generate(spec), spec.info)


class TestGaussianSem:
    """Test cases for the Gaussian linear SEM"""

    def test_defaults(self):
        """Test zero coefficients and unit variances"""
        sem = GaussianSem()
        assert sem.alpha_ay == 0.0
        assert sem.var_y == 1.0

    def test_non_positive_variance(self):
        """Test variances must be positive"""
        with pytest.raises(DomainError):
            GaussianSem(var_u=0.0)

    def test_non_finite_coefficient(self):
        """Test infinite coefficients are rejected"""
        with pytest.raises(DomainError):
            GaussianSem(alpha_ay=float('inf'))

    def test_from_dict_unknown_key(self):
        """Test unknown coefficient names"""
        with pytest.raises(InputError):
            GaussianSem.from_dict({'alpha_xy': 1.0})

    def test_from_dict(self):
        """Test parsing coefficients"""
        sem = GaussianSem.from_dict({'alpha_ay': '2.5', 'mu_u': 1})
        assert sem.alpha_ay == 2.5
        assert sem.to_dict()['mu_u'] == 1.0

    def test_counterfactual_moments(self):
        """Test closed-form E[Y(a)] and Var[Y(a)]"""
        sem = GaussianSem(mu_u=1.0, beta0_y=0.5, alpha_ay=2.0, alpha_uy=3.0, var_u=2.0, var_y=0.5)
        assert sem_counterfactual_mean(sem, 1.0) == pytest.approx(0.5 + 2.0 + 3.0)
        assert sem_counterfactual_mean(sem, 0.0) == pytest.approx(3.5)
        assert sem_counterfactual_variance(sem) == pytest.approx(9.0 * 2.0 + 0.5)

    def test_observational_slope_matches_symbolic_covariance(self):
        """Test cov(A, Y) / var(A) against a symbolic derivation"""
        a_ua, a_za, a_uz, a_ay, a_uy = sp.symbols('a_ua a_za a_uz a_ay a_uy')
        v_u, v_z, v_a = sp.symbols('v_u v_z v_a', positive=True)
        # A and Y as linear forms in the independent disturbances (eU, eZ, eA, eY)
        a_coeffs = [a_ua + a_za * a_uz, a_za, 1, 0]
        y_coeffs = [a_ay * c for c in a_coeffs]
        y_coeffs[0] += a_uy
        y_coeffs[3] += 1
        variances = [v_u, v_z, v_a, 1]
        cov_ay = sum(ca * cy * v for ca, cy, v in zip(a_coeffs, y_coeffs, variances))
        var_a = sum(ca ** 2 * v for ca, v in zip(a_coeffs, variances))
        slope = cov_ay / var_a

        values = {a_ua: 0.7, a_za: -1.2, a_uz: 0.4, a_ay: 1.5, a_uy: 2.0, v_u: 1.3, v_z: 0.8, v_a: 0.6}
        sem = GaussianSem(alpha_ua=0.7, alpha_za=-1.2, alpha_uz=0.4, alpha_ay=1.5, alpha_uy=2.0,
                          var_u=1.3, var_z=0.8, var_a=0.6)
        assert sem_observational_slope(sem) == pytest.approx(float(slope.subs(values)), rel=1e-12)

    def test_unconfounded_slope_is_effect(self):
        """Test the slope equals the effect when U does not reach Y"""
        sem = GaussianSem(alpha_ua=1.0, alpha_ay=-0.3, alpha_uy=0.0)
        assert sem_observational_slope(sem) == pytest.approx(-0.3)

    def test_simulate_shape_and_determinism(self):
        """Test column layout and seed reproducibility"""
        sem = random_sem(3)
        first = sem_simulate(sem, 100, seed=5)
        second = sem_simulate(sem, 100, seed=5)
        assert first.shape == (100, 5)
        assert np.array_equal(first, second)

    def test_simulate_intervention(self):
        """Test do(A = a) fixes the treatment column"""
        draws = sem_simulate(random_sem(1), 50, seed=0, intervention=1.5)
        assert np.all(draws[:, 2] == 1.5)

    def test_simulate_needs_draws(self):
        """Test n must be positive"""
        with pytest.raises(DomainError):
            sem_simulate(GaussianSem(), 0, seed=0)

    @pytest.mark.slow
    def test_interventional_mean_by_simulation(self):
        """Test the Monte Carlo mean of Y(a) against the closed form"""
        sem = GaussianSem(mu_u=0.5, beta0_y=1.0, alpha_ay=2.0, alpha_uy=-1.0, alpha_ua=0.8)
        draws = sem_simulate(sem, 200_000, seed=0, intervention=1.0)
        se = np.sqrt(sem_counterfactual_variance(sem) / 200_000)
        assert abs(draws[:, 4].mean() - sem_counterfactual_mean(sem, 1.0)) < 4 * se

    def test_random_sem_ranges(self):
        """Test random coefficients stay inside their ranges"""
        sem = random_sem(0, coefficient_range=(-1.0, 1.0), variance_range=(0.5, 0.6))
        for name, value in sem.to_dict().items():
            if name.startswith('var'):
                assert 0.5 <= value <= 0.6
            else:
                assert -1.0 <= value <= 1.0
