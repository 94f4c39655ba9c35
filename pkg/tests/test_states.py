import itertools

import pytest

from rivalhmm.states import (
    N_JOINT_OBS,
    N_STATES,
    OBS_RADICES,
    DiscreteObservation,
    ErsMode,
    HiddenState,
    MomStatus,
    TyreStage,
    all_states,
    ers_marginal_groups,
    joint_obs_decode,
    joint_obs_index,
    mom_marginal_groups,
    state_decode,
    state_index,
    tyre_marginal_groups,
)


def test_enum_ordinals():
    assert [int(e) for e in ErsMode] == [0, 1, 2, 3]
    assert [int(m) for m in MomStatus] == [0, 1]
    assert [int(t) for t in TyreStage] == [0, 1, 2, 3, 4]


def test_state_index_examples():
    assert state_index(HiddenState(ErsMode.H, MomStatus.AVAILABLE, TyreStage.NEW)) == 0
    assert state_index(HiddenState(ErsMode.L_DERATE, MomStatus.SPENT, TyreStage.CLIFF)) == 39
    assert state_index(HiddenState(ErsMode.M, MomStatus.AVAILABLE, TyreStage.MODERATE)) == 12


def test_state_round_trip():
    seen = set()
    for s in all_states():
        i = state_index(s)
        assert state_decode(i) == s
        seen.add(i)
    assert seen == set(range(N_STATES))


def test_state_decode_out_of_range():
    with pytest.raises(IndexError):
        state_decode(40)
    with pytest.raises(IndexError):
        state_decode(-1)


def _mixed_radix_oracle(o):
    # Brute force: position of o in the lexicographic enumeration.
    weights = []
    for k in range(len(OBS_RADICES)):
        w = 1
        for r in OBS_RADICES[k + 1:]:
            w *= r
        weights.append(w)
    return sum(int(v) * w for v, w in zip(o, weights))


def test_joint_obs_examples():
    assert joint_obs_index((0, 0, 0, 0, 0, 0)) == 0
    assert joint_obs_index((7, 6, 4, 4, 1, 5)) == 16799
    # 5*2100 + 3*300 + 2*60 + 0*12 + 1*6 + 0
    assert joint_obs_index((5, 3, 2, 0, 1, 0)) == 11526
    assert _mixed_radix_oracle((5, 3, 2, 0, 1, 0)) == 11526


def test_joint_obs_exhaustive_round_trip():
    for i, o in enumerate(itertools.product(*(range(r) for r in OBS_RADICES))):
        assert joint_obs_index(o) == i
        assert joint_obs_decode(i) == DiscreteObservation(*o)
    assert i + 1 == N_JOINT_OBS == 16800


def test_joint_obs_out_of_range():
    with pytest.raises(IndexError):
        joint_obs_index((8, 0, 0, 0, 0, 0))
    with pytest.raises(IndexError):
        joint_obs_decode(16800)


def test_marginal_groups_partition():
    groups = ers_marginal_groups()
    assert groups[ErsMode.H] == list(range(10))
    assert groups[ErsMode.L_HARVEST] == list(range(20, 30))
    for g in (groups, mom_marginal_groups(), tyre_marginal_groups()):
        members = [i for v in g.values() for i in v]
        assert sorted(members) == list(range(N_STATES))
