import numpy as np
import pytest

from rivalhmm.emission import build_emission_params
from rivalhmm.env import (
    BURN,
    HARVEST,
    DuelConfig,
    DuelEnv,
    EgoState,
    lookahead_rewards,
    step_ego,
)
from rivalhmm.states import ErsMode, MomStatus

PARAMS = build_emission_params()


def _step(ego, action, rival_time, chaser_time, armed=False, seed=0, cfg=DuelConfig()):
    return step_ego(ego, action, rival_time, chaser_time, armed, PARAMS, np.random.default_rng(seed), cfg)


def _own_time(ego, action, seed=0, cfg=DuelConfig()):
    nxt, *_ = _step(ego, action, 0.0, 0.0, seed=seed, cfg=cfg)
    return nxt.gap_ahead - ego.gap_ahead


def test_equal_sector_times_keep_the_gap():
    ego = EgoState(ers=0, mom=int(MomStatus.SPENT), gap_ahead=1.5, gap_behind=1.5)
    t = _own_time(ego, HARVEST, seed=4)
    nxt, gained, passed, failed = _step(ego, HARVEST, t, t, seed=4)
    assert nxt.gap_ahead == pytest.approx(1.5) and nxt.gap_behind == pytest.approx(1.5)
    assert (gained, passed, failed) == (0, False, False)
    assert nxt.closure == pytest.approx(0.0)


def test_overtake_and_being_overtaken():
    ego = EgoState(ers=0, mom=int(MomStatus.SPENT), gap_ahead=0.1, gap_behind=5.0)
    t = _own_time(ego, BURN, seed=2)
    nxt, gained, passed, _ = _step(ego, BURN, t + 0.5, t, seed=2)
    assert nxt.gap_ahead == pytest.approx(-0.4)
    assert gained == 1 and passed
    ego = EgoState(ers=0, mom=int(MomStatus.SPENT), gap_ahead=5.0, gap_behind=0.1)
    nxt, gained, passed, _ = _step(ego, HARVEST, t, t - 0.5, seed=2)
    assert gained == -1 and not passed


def test_attack_into_trap_fails_and_depletes():
    ego = EgoState(ers=0, mom=int(MomStatus.SPENT), gap_ahead=0.1, gap_behind=5.0)
    t = _own_time(ego, BURN, seed=1)
    nxt, gained, passed, failed = _step(ego, BURN, t + 1.0, t, armed=True, seed=1)
    assert failed and gained == 0 and not passed
    assert nxt.ers == ErsMode.L_DERATE
    assert nxt.gap_ahead == pytest.approx(DuelConfig().trap_reset_gap)
    # Harvesting through an armed trap is not an attack.
    nxt, gained, passed, failed = _step(ego, HARVEST, t + 1.0, t, armed=True, seed=1)
    assert not failed


def test_burn_is_faster_than_harvest_when_charged():
    ego = EgoState(ers=0, mom=int(MomStatus.SPENT), gap_ahead=3.0, gap_behind=3.0)
    burn = np.mean([_own_time(ego, BURN, s) for s in range(400)])
    harvest = np.mean([_own_time(ego, HARVEST, s) for s in range(400)])
    assert burn < harvest


def test_override_spends_the_charge_within_earn_gap():
    ego = EgoState(ers=0, mom=int(MomStatus.AVAILABLE), gap_ahead=0.5)
    nxt, *_ = _step(ego, BURN, 100.0, 0.0)
    assert nxt.mom == MomStatus.SPENT
    ego = EgoState(ers=0, mom=int(MomStatus.AVAILABLE), gap_ahead=3.0)
    nxt, *_ = _step(ego, BURN, 100.0, 0.0)
    assert nxt.mom == MomStatus.AVAILABLE


def test_bad_action():
    with pytest.raises(ValueError):
        _step(EgoState(), 2, 0.0, 0.0)


def test_lookahead_rewards():
    r = lookahead_rewards([0, 1, 0, 0, 0, 0, 0], horizon=5, gamma=0.5)
    np.testing.assert_allclose(r, [0.25, 0.5, 0, 0, 0, 0, 0])
    r = lookahead_rewards([1, 0, 0, 0, 0, 0, -1], horizon=5, gamma=1.0)
    np.testing.assert_allclose(r, [1, 0, -1, -1, -1, -1, -1])
    np.testing.assert_allclose(lookahead_rewards([1, 1], 5, 1.0), [2, 1])


def test_env_episode_is_deterministic():
    def run(seed):
        env = DuelEnv()
        obs = env.reset(seed, "trap_setter")
        out, done, k = [], False, 0
        while not done:
            obs, info, done = env.step(BURN if k % 2 else HARVEST)
            out.append((info.gained, info.trap_fired, round(obs.ego.gap_ahead, 12)))
            k += 1
        return out

    a = run(3)
    assert len(a) == DuelEnv().circuit.n_sectors
    assert a == run(3)
    assert a != run(4)


def test_env_beliefs_stay_normalised():
    env = DuelEnv()
    obs = env.reset(1, "aggressive")
    done = False
    while not done:
        obs, info, done = env.step(HARVEST)
        assert obs.belief.sum() == pytest.approx(1.0, abs=1e-9)
        assert 0 <= obs.rival_state < 40


def test_burning_from_a_charged_start_closes_on_a_conservative_rival():
    env = DuelEnv()

    def closing(action):
        out = []
        for seed in range(100):
            env.reset(seed, "conservative")
            start = env.ego.gap_ahead
            for _ in range(3):
                obs, info, _ = env.step(action)
                if info.gained:
                    break
            out.append(start - obs.ego.gap_ahead if not info.gained else start + 1.0)
        return np.mean(out)

    assert closing(BURN) > 0.3
    assert closing(BURN) > closing(HARVEST) + 0.3
