import pytest
import numpy as np
import sys
import os

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '../src'))

from errors import ConditioningError, DomainError, InputError  # noqa: E402
from probability import (  # noqa: E402
    CategoricalDomain, CondMatrix, FullLaw, check_ci, check_mutual_independence, check_positivity, ci_deviation,
    cond_matrix, condition, conditional_array, joint_table, law_from_dict, law_to_dict, marginalize,
    mutual_independence_deviation, observe,
)

P_X_GIVEN_U = np.array([[0.9, 0.2], [0.1, 0.8]])
P_Y_GIVEN_U = np.array([[0.7, 0.1], [0.3, 0.9]])


def latent_class_law():
    """X and Y independent given a fair binary U"""
    table = np.einsum('u,xu,yu->uxy', np.array([0.5, 0.5]), P_X_GIVEN_U, P_Y_GIVEN_U)
    domains = tuple(CategoricalDomain.of_size(name, 2) for name in ('U', 'X', 'Y'))
    return FullLaw(domains, table, (('U', 'X'), ('U', 'Y')))


def product_law():
    table = np.outer([0.3, 0.7], [0.4, 0.6])
    return FullLaw((CategoricalDomain.of_size('X', 2), CategoricalDomain.of_size('Y', 2)), table)


class TestCategoricalDomain:
    """Test cases for categorical domains"""

    def test_of_size_labels(self):
        """Test generated labels use the lowercase variable name"""
        domain = CategoricalDomain.of_size('U', 3)
        assert domain.labels == ('u0', 'u1', 'u2')
        assert domain.cardinality == 3

    def test_index_by_label_and_position(self):
        """Test states resolve from labels and integer positions"""
        domain = CategoricalDomain('A', ('lo', 'hi'))
        assert domain.index('hi') == 1
        assert domain.index(0) == 0

    def test_unknown_state(self):
        """Test unknown labels and out-of-range indices"""
        domain = CategoricalDomain.of_size('A', 2)
        with pytest.raises(DomainError):
            domain.index('a7')
        with pytest.raises(DomainError):
            domain.index(2)

    def test_invalid_domains(self):
        """Test empty, duplicate and zero-size domains are rejected"""
        with pytest.raises(DomainError):
            CategoricalDomain('A', ())
        with pytest.raises(DomainError):
            CategoricalDomain('A', ('x', 'x'))
        with pytest.raises(DomainError):
            CategoricalDomain.of_size('A', 0)

    def test_domain_error_is_value_error(self):
        """Test DomainError can be caught as ValueError"""
        with pytest.raises(ValueError):
            CategoricalDomain('', ('x',))


class TestFullLaw:
    """Test cases for joint law validation"""

    def test_flat_probabilities_are_reshaped(self):
        """Test row-major flattening with the last domain fastest"""
        law = FullLaw((CategoricalDomain.of_size('X', 2), CategoricalDomain.of_size('Y', 3)),
                      [0.1, 0.2, 0.3, 0.1, 0.2, 0.1])
        assert law.shape == (2, 3)
        assert law.probabilities[0, 2] == 0.3
        assert law.names == ['X', 'Y']
        assert law.cardinality('Y') == 3

    def test_probabilities_are_read_only(self):
        """Test the stored table cannot be mutated"""
        law = product_law()
        with pytest.raises(ValueError):
            law.probabilities[0, 0] = 0.5

    def test_wrong_size(self):
        """Test mismatched table size"""
        with pytest.raises(InputError):
            FullLaw((CategoricalDomain.of_size('X', 2),), [0.2, 0.3, 0.5])

    def test_negative_entry(self):
        """Test negative probabilities are rejected"""
        with pytest.raises(InputError):
            FullLaw((CategoricalDomain.of_size('X', 2),), [1.5, -0.5])

    def test_not_normalized(self):
        """Test tables that do not sum to one"""
        with pytest.raises(InputError, match='sum'):
            FullLaw((CategoricalDomain.of_size('X', 2),), [0.5, 0.4])

    def test_non_finite(self):
        """Test NaN entries are rejected"""
        with pytest.raises(InputError):
            FullLaw((CategoricalDomain.of_size('X', 2),), [np.nan, 1.0])

    def test_duplicate_names(self):
        """Test duplicate variable names"""
        with pytest.raises(DomainError):
            FullLaw((CategoricalDomain.of_size('X', 1), CategoricalDomain.of_size('X', 1)), [1.0])

    def test_dag_edge_unknown_variable(self):
        """Test DAG edges must reference known variables"""
        with pytest.raises(DomainError):
            FullLaw((CategoricalDomain.of_size('X', 1),), [1.0], (('X', 'Q'),))

    def test_unknown_axis(self):
        """Test looking up a missing variable"""
        with pytest.raises(DomainError):
            product_law().axis('Z')

    def test_fingerprint(self):
        """Test fingerprints are stable and content sensitive"""
        assert product_law().fingerprint() == product_law().fingerprint()
        other = FullLaw(product_law().domains, np.outer([0.5, 0.5], [0.4, 0.6]))
        assert other.fingerprint() != product_law().fingerprint()


class TestMarginalsAndConditionals:
    """Test cases for marginalization and conditioning"""

    def test_joint_table_order(self):
        """Test joint_table honours the requested axis order"""
        law = product_law()
        table = joint_table(law, ['Y', 'X'])
        assert table.shape == (2, 2)
        assert table[1, 0] == pytest.approx(0.3 * 0.6)

    def test_marginalize(self):
        """Test summing out variables and pruning DAG edges"""
        law = latent_class_law()
        margin = marginalize(law, ['X', 'U'])
        assert margin.names == ['U', 'X']
        assert margin.dag == (('U', 'X'),)
        assert margin.probabilities[:, 0].tolist() == pytest.approx([0.45, 0.1])

    def test_marginalize_everything_kept(self):
        """Test keeping every variable returns the same law"""
        law = product_law()
        assert marginalize(law, ['X', 'Y']) is law

    def test_observe_drops_latent(self):
        """Test the observed margin excludes latent variables"""
        observed = observe(latent_class_law(), ['U'])
        assert observed.names == ['X', 'Y']
        assert observed.probabilities.sum() == pytest.approx(1.0)

    def test_condition(self):
        """Test conditioning on a labelled event"""
        law = latent_class_law()
        cond = condition(law, ['X'], {'U': 'u1'})
        np.testing.assert_allclose(cond.probabilities, P_X_GIVEN_U[:, 1], atol=1e-14)

    def test_condition_zero_mass(self):
        """Test conditioning on an impossible event"""
        law = FullLaw((CategoricalDomain.of_size('X', 2), CategoricalDomain.of_size('Y', 2)),
                      [0.5, 0.5, 0.0, 0.0])
        with pytest.raises(ConditioningError) as exc:
            condition(law, ['Y'], {'X': 1})
        assert exc.value.details['event'] == 'X=x1'

    def test_condition_overlap(self):
        """Test target and conditioning set must be disjoint"""
        with pytest.raises(DomainError):
            condition(product_law(), ['X'], {'X': 0})

    def test_conditional_array(self):
        """Test every stratum of f(target | given) at once"""
        array = conditional_array(latent_class_law(), ['Y'], ['U'])
        np.testing.assert_allclose(array, P_Y_GIVEN_U, atol=1e-14)

    def test_conditional_array_zero_stratum(self):
        """Test a zero-mass stratum raises"""
        law = FullLaw((CategoricalDomain.of_size('X', 2), CategoricalDomain.of_size('Y', 2)),
                      [0.5, 0.5, 0.0, 0.0])
        with pytest.raises(ConditioningError):
            conditional_array(law, ['Y'], ['X'])

    def test_cond_matrix(self):
        """Test column-stochastic conditional matrices"""
        matrix = cond_matrix(latent_class_law(), 'X', 'U')
        assert isinstance(matrix, CondMatrix)
        np.testing.assert_allclose(matrix.entries, P_X_GIVEN_U, atol=1e-14)
        np.testing.assert_allclose(matrix.entries.sum(axis=0), 1.0)

    def test_cond_matrix_with_context(self):
        """Test context labels are recorded"""
        matrix = cond_matrix(latent_class_law(), 'X', 'Y', {'U': 0})
        assert matrix.context == {'U': 'u0'}
        # X and Y are independent given U
        np.testing.assert_allclose(matrix.entries[:, 0], P_X_GIVEN_U[:, 0], atol=1e-14)

    def test_cond_matrix_same_variable(self):
        """Test P(X | X) is the identity"""
        matrix = cond_matrix(product_law(), 'X', 'X')
        np.testing.assert_allclose(matrix.entries, np.eye(2))

    def test_cond_matrix_rejects_bad_columns(self):
        """Test CondMatrix validation"""
        domain = CategoricalDomain.of_size('X', 2)
        with pytest.raises(InputError):
            CondMatrix(domain, domain, [[0.5, 0.5], [0.6, 0.5]])


class TestIndependence:
    """Test cases for numerical independence checks"""

    def test_product_law_is_independent(self):
        """Test a product law passes the CI check"""
        assert check_ci(product_law(), ['X'], ['Y'])

    def test_conditional_independence_given_latent(self):
        """Test X _||_ Y | U holds but X _||_ Y does not"""
        law = latent_class_law()
        assert ci_deviation(law, ['X'], ['Y'], ['U']) < 1e-14
        assert check_ci(law, ['X'], ['Y'], ['U'])
        assert ci_deviation(law, ['X'], ['Y']) == pytest.approx(0.105)
        assert not check_ci(law, ['X'], ['Y'])

    def test_tolerance_override(self):
        """Test a loose tolerance accepts dependence"""
        assert check_ci(latent_class_law(), ['X'], ['Y'], tol=0.2)

    def test_mutual_independence(self):
        """Test joint independence of three variables"""
        table = np.einsum('a,b,c->abc', [0.2, 0.8], [0.5, 0.5], [0.1, 0.9])
        law = FullLaw(tuple(CategoricalDomain.of_size(n, 2) for n in 'ABC'), table)
        assert mutual_independence_deviation(law, ['A', 'B', 'C']) < 1e-14
        assert check_mutual_independence(law, ['A', ['B', 'C']])

    def test_pairwise_is_not_mutual(self):
        """Test XOR structure: pairwise independent, not mutually independent"""
        table = np.zeros((2, 2, 2))
        for a in range(2):
            for b in range(2):
                table[a, b, a ^ b] = 0.25
        law = FullLaw(tuple(CategoricalDomain.of_size(n, 2) for n in 'ABC'), table)
        assert check_ci(law, ['A'], ['C'])
        assert not check_mutual_independence(law, ['A', 'B', 'C'])

    def test_zero_mass_strata_are_skipped(self):
        """Test strata with zero mass do not count"""
        law = FullLaw(tuple(CategoricalDomain.of_size(n, 2) for n in 'GXY'),
                      np.concatenate([np.outer([0.3, 0.7], [0.4, 0.6]).ravel(), np.zeros(4)]))
        assert check_ci(law, ['X'], ['Y'], ['G'])


class TestPositivity:
    """Test cases for positivity checks"""

    def test_minimum_mass_and_stratum(self):
        """Test the smallest stratum is reported with labels"""
        mass, stratum = check_positivity(product_law(), ['X', 'Y'])
        assert mass == pytest.approx(0.12)
        assert stratum == {'X': 'x0', 'Y': 'y0'}

    def test_zero_stratum(self):
        """Test an empty stratum reports zero"""
        law = FullLaw((CategoricalDomain.of_size('X', 2), CategoricalDomain.of_size('Y', 2)),
                      [0.5, 0.5, 0.0, 0.0])
        mass, stratum = check_positivity(law, ['X'])
        assert mass == 0.0
        assert stratum == {'X': 'x1'}


class TestSerialization:
    """Test cases for the JSON model format"""

    def test_law_to_dict(self):
        """Test the serialized layout"""
        data = law_to_dict(latent_class_law())
        assert [d['name'] for d in data['domains']] == ['U', 'X', 'Y']
        assert len(data['probabilities']) == 8
        assert data['dag'] == [['U', 'X'], ['U', 'Y']]

    def test_round_trip_is_exact(self):
        """Test parsing the serialized form reproduces the table bit for bit"""
        law = latent_class_law()
        parsed = law_from_dict(law_to_dict(law))
        assert np.array_equal(parsed.probabilities, law.probabilities)
        assert parsed.fingerprint() == law.fingerprint()

    def test_dag_optional(self):
        """Test a model without a dag key"""
        law = law_from_dict({'domains': [{'name': 'X', 'labels': ['a', 'b']}], 'probabilities': [0.25, 0.75]})
        assert law.dag == ()

    def test_malformed(self):
        """Test missing keys are reported as input errors"""
        with pytest.raises(InputError):
            law_from_dict({'probabilities': [1.0]})
        with pytest.raises(InputError):
            law_from_dict({'domains': [{'name': 'X', 'labels': ['a']}], 'probabilities': ['x']})
