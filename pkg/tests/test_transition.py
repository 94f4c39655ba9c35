import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rivalhmm.states import N_STATES, ERS_OF, MOM_OF, TYRE_OF, ErsMode
from rivalhmm.transition import (
    T_BURN,
    T_HARVEST,
    TYRE_PERSISTENCE,
    TransitionModel,
    compose,
    marginal_ers,
    mom_activate_row,
    mom_idle,
    tyre_matrix,
)

H, M, LH, LD = ErsMode


def test_factor_values():
    np.testing.assert_array_equal(T_BURN[H], [0.60, 0.35, 0.03, 0.02])
    np.testing.assert_array_equal(T_HARVEST[LD], [0.00, 0.45, 0.30, 0.25])
    np.testing.assert_array_equal(mom_idle(0.25), [[0.4, 0.6], [0.25, 0.75]])
    np.testing.assert_array_equal(mom_activate_row(0.25), [[0.0, 1.0], [0.25, 0.75]])
    np.testing.assert_array_equal(mom_activate_row(0.0)[1], [0.0, 1.0])
    assert TYRE_PERSISTENCE == (23 / 24, 20 / 21, 14 / 15, 14 / 15, 1.0)


def test_factor_rows_sum_to_one():
    for m in (T_BURN, T_HARVEST, mom_idle(), mom_activate_row(), tyre_matrix()):
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=0)


def test_asymmetries():
    assert T_BURN[LH, M] == 0.25 > T_BURN[LD, M] == 0.05
    assert T_HARVEST[LD, LH] == 0.30
    assert T_BURN[LD, H] == 0.0 and T_HARVEST[LD, H] == 0.0


def test_tyre_chain_monotone_and_absorbing():
    T = tyre_matrix()
    assert np.all(np.tril(T, -1) == 0)
    assert np.all(np.triu(T, 2) == 0)
    assert T[4, 4] == 1.0


def test_marginal_ers_examples():
    np.testing.assert_array_equal(marginal_ers(H, 1.0), [0.60, 0.35, 0.03, 0.02])
    np.testing.assert_array_equal(marginal_ers(LD, 0.0), [0.00, 0.45, 0.30, 0.25])
    assert marginal_ers(H, 0.55)[0] == pytest.approx(0.55 * 0.60 + 0.45 * 0.95, abs=1e-15)
    with pytest.raises(ValueError):
        marginal_ers(H, 1.5)


def test_compose_entries():
    T = compose(1.0, 0.25).matrix
    assert T[0, 15] == pytest.approx(0.35 * 0.60 * (23 / 24), abs=1e-15)
    T0 = compose(0.0, 0.0).matrix
    assert T0[5, 5] == pytest.approx(0.95 * 1.0 * (23 / 24), abs=1e-15)
    assert T0[4, 4] == pytest.approx(0.95 * 0.4, abs=1e-15)
    cliff_row = compose().matrix[4]
    assert cliff_row[TYRE_OF != 4].sum() == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.sampled_from(["idle", "activate"]))
def test_composed_rows_and_factorisation(p_burn, p_e, mode):
    T = compose(p_burn, p_e, mode).matrix
    np.testing.assert_allclose(T.sum(axis=1), 1.0, atol=1e-12)
    ers = p_burn * T_BURN + (1 - p_burn) * T_HARVEST
    mom = mom_idle(p_e) if mode == "idle" else mom_activate_row(p_e)
    tyre = tyre_matrix()
    i, j = 13, 27
    expected = ers[ERS_OF[i], ERS_OF[j]] * mom[MOM_OF[i], MOM_OF[j]] * tyre[TYRE_OF[i], TYRE_OF[j]]
    assert T[i, j] == pytest.approx(expected, abs=1e-15)


def test_composed_matrix_preserves_normalisation():
    rng = np.random.default_rng(0)
    b = rng.dirichlet(np.ones(N_STATES))
    T = TransitionModel.default().matrix()
    for _ in range(200):
        b = b @ T
    assert b.sum() == pytest.approx(1.0, abs=1e-12)


def test_no_derate_to_high_in_any_composition():
    T = compose(0.7, 0.3).matrix
    assert T[np.ix_(ERS_OF == LD, ERS_OF == H)].sum() == 0.0


def test_model_matrix_uses_prior_and_override():
    m = TransitionModel.default()
    np.testing.assert_array_equal(m.matrix(), compose(0.55, 0.25).matrix)
    np.testing.assert_array_equal(m.matrix(1.0), compose(0.55, 1.0).matrix)
    with pytest.raises(ValueError):
        mom_idle(-0.1)
    with pytest.raises(ValueError):
        compose(0.5, 0.25, "sideways")
