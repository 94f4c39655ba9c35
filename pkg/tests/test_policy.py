import numpy as np
import pytest

from rivalhmm.env import BURN, HARVEST, DuelEnv, EgoState, Observation
from rivalhmm.policy import (
    CHECKPOINT_MAGIC,
    CLEAR,
    CLOSE,
    INPUT_DIM,
    NEUTRAL,
    THREAT,
    DQNAgent,
    GapThresholds,
    MLP,
    ReplayBuffer,
    TrainConfig,
    baseline_b1,
    baseline_b2,
    baseline_policy,
    clip_grads,
    q_forward,
    double_dqn_targets,
    encode_input,
    epsilon,
    huber,
    load_checkpoint,
    loss_and_grads,
    run_training_race,
    save_checkpoint,
    shaping,
    with_oracle_belief,
)
from rivalhmm.states import N_STATES


def make_obs(ers=0, mom=0, gap_ahead=0.5, gap_behind=3.0, raw0=-0.1, belief=None, state=0, lap=10, sector=1):
    b = np.full(N_STATES, 1 / N_STATES) if belief is None else belief
    raw = np.array([raw0, 0.0, 0.0, 0.0, 0.0, 0.0])
    return Observation(EgoState(ers=ers, mom=mom, gap_ahead=gap_ahead, gap_behind=gap_behind),
                       t=3 * lap + sector, lap=lap, sector=sector, n_laps=58, belief=b,
                       rival_raw=raw, rival_state=state, trap_flag=False)


def test_gap_categories():
    g = GapThresholds()
    assert [g.category(v) for v in (0.2, 0.99, 1.0, 1.99, 2.0, 4.9, 5.0, 30.0)] == \
        [CLOSE, CLOSE, THREAT, THREAT, NEUTRAL, NEUTRAL, CLEAR, CLEAR]


def test_encoding_layout():
    rng = np.random.default_rng(0)
    b = rng.dirichlet(np.ones(N_STATES))
    obs = make_obs(ers=2, mom=1, gap_ahead=1.5, gap_behind=7.0, belief=b, lap=57, sector=2)
    x = encode_input(obs)
    assert x.shape == (INPUT_DIM,) == (66,)
    np.testing.assert_array_equal(x[0:4], [0, 0, 1, 0])
    np.testing.assert_array_equal(x[4:6], [0, 1])
    np.testing.assert_array_equal(x[6:9], [0, 0, 1])
    np.testing.assert_array_equal(x[9:13], [0, 1, 0, 0])
    np.testing.assert_array_equal(x[13:17], [0, 0, 0, 1])
    assert x[22] == pytest.approx(1.0)
    np.testing.assert_array_equal(x[23:26], [0, 0, 1])
    np.testing.assert_array_equal(x[26:], b)
    o = with_oracle_belief(x, 17)
    assert o[26 + 17] == 1.0 and o[26:].sum() == 1.0
    np.testing.assert_array_equal(o[:26], x[:26])
    with pytest.raises(ValueError):
        encode_input(obs, np.ones(3))


def numeric_grads(net, x, a, y, eps=1e-6):
    out = []
    for p in net.params():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + eps
            lp, _ = loss_and_grads(net, x, a, y)
            p[i] = old - eps
            lm, _ = loss_and_grads(net, x, a, y)
            p[i] = old
            g[i] = (lp - lm) / (2 * eps)
        out.append(g)
    return out


def test_backprop_matches_finite_differences():
    rng = np.random.default_rng(4)
    net = MLP.create((7, 6, 5, 4, 2), rng)
    x = rng.normal(size=(9, 7))
    a = rng.integers(0, 2, size=9)
    y = rng.normal(scale=0.5, size=9)
    _, analytic = loss_and_grads(net, x, a, y)
    numeric = numeric_grads(net, x, a, y)
    for ga, gn in zip(analytic, numeric):
        err = np.abs(ga - gn) / np.maximum(1.0, np.abs(ga) + np.abs(gn))
        assert err.max() < 1e-4


def test_he_init_scale():
    net = MLP.create((INPUT_DIM, 256, 256, 128, 2), np.random.default_rng(0))
    assert net.sizes == (66, 256, 256, 128, 2)
    assert np.std(net.weights[1]) == pytest.approx(np.sqrt(2 / 256), rel=0.05)
    assert all(np.all(b == 0) for b in net.biases)


def test_huber_and_clip():
    loss, g = huber(np.array([-3.0, -0.5, 0.0, 0.5, 3.0]))
    np.testing.assert_allclose(loss, [2.5, 0.125, 0, 0.125, 2.5])
    np.testing.assert_allclose(g, [-1, -0.5, 0, 0.5, 1])
    grads = [np.full(4, 3.0), np.full(3, 4.0)]
    norm = clip_grads(grads, 10.0)
    assert norm == pytest.approx(np.sqrt(36 + 48))
    assert np.sqrt(sum((q * q).sum() for q in grads)) == pytest.approx(norm)
    grads = [np.full(100, 3.0)]
    assert clip_grads(grads, 10.0) == pytest.approx(30.0)
    assert np.linalg.norm(grads[0]) == pytest.approx(10.0)


class _Fixed:
    """A stand-in network returning preset Q rows."""

    def __init__(self, q):
        self.q = np.asarray(q, dtype=float)

    def forward(self, x):
        return self.q


def test_double_dqn_uses_online_argmax_and_target_value():
    online = _Fixed([[1.0, 5.0], [3.0, 0.0]])
    target = _Fixed([[10.0, -2.0], [7.0, 100.0]])
    y = double_dqn_targets(online, target, [0.5, 1.0], np.zeros((2, 3)), [False, False], 0.9)
    np.testing.assert_allclose(y, [0.5 + 0.9 * -2.0, 1.0 + 0.9 * 7.0])
    y = double_dqn_targets(online, target, [0.5, 1.0], np.zeros((2, 3)), [True, False], 0.9)
    assert y[0] == 0.5
    y = double_dqn_targets(online, target, [0.5, 1.0], np.zeros((2, 3)), [False, False], 0.0)
    np.testing.assert_allclose(y, [0.5, 1.0])


def test_replay_fifo_and_sampling():
    buf = ReplayBuffer(5, dim=2)
    for i in range(8):
        buf.add(np.full(2, i), i % 2, float(i), np.full(2, i + 1), False)
    assert len(buf) == 5
    np.testing.assert_array_equal(buf.ordered_rewards(), [3, 4, 5, 6, 7])
    x, a, r, nx, t = buf.sample(5, np.random.default_rng(0))
    assert sorted(r) == [3, 4, 5, 6, 7]
    np.testing.assert_array_equal(nx[:, 0], x[:, 0] + 1)
    with pytest.raises(ValueError):
        buf.sample(6, np.random.default_rng(0))
    buf.clear()
    assert len(buf) == 0


def test_epsilon_schedule():
    cfg = TrainConfig()
    assert epsilon(0, cfg) == 1.0
    assert epsilon(10_000, cfg) == pytest.approx(0.525)
    assert epsilon(20_000, cfg) == pytest.approx(0.05)
    assert epsilon(10 ** 6, cfg) == pytest.approx(0.05)


def test_no_update_below_one_batch():
    agent = DQNAgent(TrainConfig(hidden=(8,)))
    for _ in range(63):
        agent.buffer.add(np.zeros(INPUT_DIM), 0, 0.0, np.zeros(INPUT_DIM), True)
    before = [p.copy() for p in agent.online.params()]
    assert agent.train_step() is None
    assert all(np.array_equal(p, q) for p, q in zip(before, agent.online.params()))
    agent.buffer.add(np.zeros(INPUT_DIM), 0, 0.0, np.zeros(INPUT_DIM), True)
    assert agent.train_step() is not None


def test_target_network_syncs_every_500_steps():
    agent = DQNAgent(TrainConfig(hidden=(8,)))
    rng = np.random.default_rng(1)
    for _ in range(64):
        agent.buffer.add(rng.normal(size=INPUT_DIM), int(rng.integers(2)), float(rng.normal()),
                         rng.normal(size=INPUT_DIM), bool(rng.integers(2)))
    w0 = agent.target.weights[0].copy()
    for _ in range(499):
        agent.train_step()
    assert np.array_equal(agent.target.weights[0], w0)
    agent.train_step()
    assert np.array_equal(agent.target.weights[0], agent.online.weights[0])


def test_learns_a_contextual_bandit():
    # Burn pays +1 when the first input is on, harvest pays +1 otherwise.
    agent = DQNAgent(TrainConfig(eps_steps=2000, seed=3))
    rng = np.random.default_rng(7)
    for _ in range(5000):
        x = np.zeros(INPUT_DIM)
        ctx = int(rng.integers(2))
        x[0] = ctx
        a = agent.act(x)
        r = 1.0 if a == (BURN if ctx else HARVEST) else 0.0
        agent.buffer.add(x, a, r, x, True)
        agent.train_step()
    on, off = np.zeros(INPUT_DIM), np.zeros(INPUT_DIM)
    on[0] = 1
    assert agent.greedy(on) == BURN and agent.greedy(off) == HARVEST


def test_shaping_terms():
    b = np.zeros(N_STATES)
    b[4] = 1.0
    assert shaping(b, 4, False, HARVEST, CLEAR, 2) == pytest.approx(0.10)
    assert shaping(b, 5, True, BURN, CLEAR, 2) == pytest.approx(-0.20)
    assert shaping(b, 5, True, HARVEST, CLEAR, 2) == 0.0
    assert shaping(b, 4, True, BURN, THREAT, 1) == pytest.approx(-0.05)
    assert shaping(b, 5, False, HARVEST, CLOSE, 0) == pytest.approx(0.05)
    assert shaping(b, 5, False, HARVEST, NEUTRAL, 0) == 0.0


def test_rule_baselines():
    assert baseline_b1(make_obs(ers=0, gap_ahead=0.5)) == BURN
    assert baseline_b1(make_obs(ers=1, gap_ahead=1.5)) == BURN
    assert baseline_b1(make_obs(ers=2, gap_ahead=0.5)) == HARVEST
    assert baseline_b1(make_obs(ers=3, gap_ahead=0.5)) == HARVEST
    assert baseline_b1(make_obs(ers=0, gap_ahead=2.5)) == HARVEST
    assert baseline_b2(make_obs(ers=0, gap_ahead=0.5, raw0=-0.1)) == BURN
    assert baseline_b2(make_obs(ers=0, gap_ahead=0.5, raw0=0.0)) == HARVEST
    assert baseline_b2(make_obs(ers=0, gap_ahead=0.5, raw0=0.3)) == HARVEST
    assert baseline_b2(make_obs(ers=2, gap_ahead=0.5, raw0=-0.3)) == HARVEST
    with pytest.raises(ValueError):
        baseline_policy("B4")
    with pytest.raises(ValueError):
        baseline_policy("B9")


def test_oracle_and_hmm_policies_differ_only_in_belief():
    net = MLP.create((INPUT_DIM, 16, 2), np.random.default_rng(2))
    obs = make_obs(state=21)
    one_hot = np.zeros(N_STATES)
    one_hot[21] = 1.0
    b3 = baseline_policy("B3", net)(obs)
    b4 = baseline_policy("B4", net)(make_obs(state=21, belief=one_hot))
    assert b3 == b4


def test_checkpoint_round_trip(tmp_path):
    net = MLP.create((INPUT_DIM, 256, 256, 128, 2), np.random.default_rng(5))
    cfg = TrainConfig(seed=11).to_dict()
    path = tmp_path / "q.bin"
    save_checkpoint(path, net, cfg)
    loaded, echo = load_checkpoint(path)
    assert echo == cfg
    assert loaded.sizes == net.sizes
    for p, q in zip(net.params(), loaded.params()):
        np.testing.assert_array_equal(p, q)
    data = path.read_bytes()
    assert data.startswith(CHECKPOINT_MAGIC)
    (tmp_path / "bad.bin").write_bytes(b"XXXXXX" + data[6:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.bin")
    (tmp_path / "long.bin").write_bytes(data + b"\0")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "long.bin")


def test_training_race_fills_buffer_with_resolved_rewards():
    env = DuelEnv()
    agent = DQNAgent(TrainConfig(hidden=(16,), shaping_lambda=0.0))
    ret, pos = run_training_race(agent, env, seed=1, profile="balanced", learn=False)
    n = env.circuit.n_sectors
    assert len(agent.buffer) == n
    assert agent.buffer.terminal[:n].sum() == 1 and agent.buffer.terminal[n - 1]
    assert agent.buffer.r[:n].sum() == pytest.approx(ret)


def test_q_forward_hand_cases():
    zero = MLP([np.zeros((INPUT_DIM, 4)), np.zeros((4, 2))], [np.zeros(4), np.zeros(2)])
    np.testing.assert_array_equal(q_forward(zero, np.ones(INPUT_DIM)), [0.0, 0.0])
    W = np.array([[1.0, -2.0], [0.5, 3.0], [-1.0, 0.0]])
    b = np.array([0.25, -0.5])
    single = MLP([W], [b])
    x = np.array([2.0, -1.0, 4.0])
    np.testing.assert_allclose(q_forward(single, x), x @ W + b)
    relu = MLP([np.eye(3), W], [np.zeros(3), b])
    np.testing.assert_allclose(q_forward(relu, x), np.maximum(x, 0) @ W + b)
    net = MLP.create((INPUT_DIM, 256, 256, 128, 2), np.random.default_rng(0))
    out = q_forward(net, np.random.default_rng(1).normal(size=(100, INPUT_DIM)) * 10)
    assert out.shape == (100, 2) and np.all(np.isfinite(out))


def test_snapshot_selection_keeps_the_best_scoring_weights():
    from rivalhmm.policy import greedy_return, train_policy

    env = DuelEnv()
    cfg = TrainConfig(hidden=(8,), n_races=3, select_every=1, select_races=2, batch_size=16, eps_steps=1)
    agent, hist = train_policy(env, cfg)
    scores = [s for _, s in hist.selection]
    assert [n for n, _ in hist.selection] == [1, 2, 3]
    assert hist.selected_after == 1 + int(np.argmax(scores))
    assert greedy_return(agent.online, env, range(cfg.select_seed_base, cfg.select_seed_base + 2)) == \
        pytest.approx(max(scores))
    assert all(np.array_equal(p, q) for p, q in zip(agent.online.params(), agent.target.params()))
    agent, hist = train_policy(env, TrainConfig(hidden=(8,), n_races=1, select_every=0))
    assert hist.selection == [] and hist.selected_after is None
    # No snapshot is scored while ε is still above its floor.
    n = env.circuit.n_sectors
    _, hist = train_policy(env, TrainConfig(hidden=(8,), n_races=3, select_every=1, select_races=1,
                                            eps_steps=2 * n))
    assert [k for k, _ in hist.selection] == [2, 3]


def test_mixed_training_alternates_profile_blocks(monkeypatch):
    import rivalhmm.policy as policy

    seen = []

    def fake_race(agent, env, seed, profile, gaps, learn=True, losses=None, belief_source=None):
        seen.append((profile, belief_source))
        return 0.0, 0

    monkeypatch.setattr(policy, "run_training_race", fake_race)
    policy.train_policy(DuelEnv(), TrainConfig(hidden=(4,), n_races=12, select_every=0, belief_source="mixed"))
    assert [s for _, s in seen] == ["hmm"] * 4 + ["oracle"] * 4 + ["hmm"] * 4
    assert [p for p, _ in seen[:4]] == [p for p, _ in seen[4:8]]


def test_oracle_race_stores_one_hot_beliefs():
    from rivalhmm.policy import _BELIEF

    agent = DQNAgent(TrainConfig(hidden=(8,)))
    run_training_race(agent, DuelEnv(), seed=3, profile="trap_setter", learn=False, belief_source="oracle")
    block = agent.buffer.x[:len(agent.buffer), _BELIEF:]
    np.testing.assert_array_equal(block.sum(axis=1), 1.0)
    assert set(np.unique(block)) == {0.0, 1.0}
    with pytest.raises(ValueError):
        run_training_race(agent, DuelEnv(), seed=3, profile="balanced", belief_source="mixed")


def test_train_every_sets_the_update_frequency():
    env = DuelEnv()
    n = env.circuit.n_sectors
    for every in (1, 4):
        cfg = TrainConfig(hidden=(8,), batch_size=16, train_every=every)
        agent = DQNAgent(cfg)
        run_training_race(agent, env, seed=2, profile="aggressive")
        first = cfg.batch_size + cfg.horizon - 1      # first step with a full batch in the buffer
        assert agent.grad_steps == sum(1 for t in range(first, n + 1) if t % every == 0)
    with pytest.raises(ValueError):
        TrainConfig(train_every=0)
