"""Double-DQN decision layer, input encoding, shaping and the rule baselines.

The network is a plain numpy MLP trained with Adam on a Huber loss. Everything
runs in float64 so gradients can be checked against finite differences.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .belief import map_state
from .env import BURN, HARVEST, DuelEnv, Observation, ers_at_least_m, lookahead_rewards
from .sim import PROFILE_ORDER
from .states import N_STATES, N_TYRE

log = logging.getLogger(__name__)

INPUT_DIM = 66
N_ACTIONS = 2
CLOSE, THREAT, NEUTRAL, CLEAR = range(4)

# Offsets of the input blocks.
_ERS, _MOM, _FUEL, _GAP_A, _GAP_B, _CLOSURE = 0, 4, 6, 9, 13, 17
_COMPOUND, _TYRE_AGE, _LAP, _SECTOR, _BELIEF = 18, 21, 22, 23, 26


@dataclass(frozen=True)
class GapThresholds:
    close: float = 1.0
    threat: float = 2.0
    neutral: float = 5.0

    def category(self, gap: float) -> int:
        if gap < self.close:
            return CLOSE
        if gap < self.threat:
            return THREAT
        if gap < self.neutral:
            return NEUTRAL
        return CLEAR


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.95
    batch_size: int = 64
    target_sync: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_steps: int = 20_000
    lr: float = 1e-3
    huber_delta: float = 1.0
    grad_clip: float = 10.0
    shaping_lambda: float = 0.3
    n_races: int = 200
    buffer_capacity: int = 50_000
    train_every: int = 4                # environment steps per gradient step
    hidden: tuple[int, ...] = (256, 256, 128)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    train_seed_base: int = 100_000
    horizon: int = 5
    reward_gamma: float = 0.95
    # "hmm", "oracle", or "mixed" (blocks of one race per profile alternate
    # between the two, so the net also sees one-hot beliefs).
    belief_source: str = "hmm"
    # Snapshot selection: once ε has reached its floor, every ``select_every``
    # races the greedy policy is scored on ``select_races`` held-out training
    # seeds and the best weights are kept. 0 disables it (last iterate).
    select_every: int = 10
    select_races: int = 50
    select_seed_base: int = 300_000

    def __post_init__(self):
        if self.belief_source not in ("hmm", "oracle", "mixed"):
            raise ValueError(f"belief_source must be 'hmm', 'oracle' or 'mixed', got {self.belief_source!r}")
        if self.train_every < 1:
            raise ValueError("train_every must be at least 1")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ValueError("buffer capacity must hold at least one batch")

    def fine_tuning(self) -> "TrainConfig":
        """Settings for fine-tuning on real races: smaller steps, no shaping."""
        return replace(self, lr=1e-4, shaping_lambda=0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for k in ("hidden", "adam_betas"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# -- input encoding ----------------------------------------------------------

def one_hot(i: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[i] = 1.0
    return v


def oracle_belief(state: int) -> np.ndarray:
    return one_hot(int(state), N_STATES)


def encode_input(obs: Observation, belief: np.ndarray | None = None,
                 gaps: GapThresholds = GapThresholds(), sectors_per_lap: int = 3) -> np.ndarray:
    """66-entry network input; ``belief`` overrides the observation's belief."""
    if sectors_per_lap != 3:
        raise ValueError("the input encoding has a three-sector block")
    b = obs.belief if belief is None else np.asarray(belief, dtype=float)
    if b.shape != (N_STATES,):
        raise ValueError(f"belief must have {N_STATES} entries")
    ego = obs.ego
    x = np.zeros(INPUT_DIM)
    x[_ERS + ego.ers] = 1.0
    x[_MOM + ego.mom] = 1.0
    x[_FUEL + min(2, 3 * obs.lap // obs.n_laps)] = 1.0
    x[_GAP_A + gaps.category(ego.gap_ahead)] = 1.0
    x[_GAP_B + gaps.category(ego.gap_behind)] = 1.0
    x[_CLOSURE] = float(np.clip(ego.closure, -1.0, 1.0))
    x[_COMPOUND + ego.compound] = 1.0
    x[_TYRE_AGE] = ego.tyre / (N_TYRE - 1)
    x[_LAP] = obs.lap / max(obs.n_laps - 1, 1)
    x[_SECTOR + obs.sector] = 1.0
    x[_BELIEF:] = b
    return x


def with_oracle_belief(x: np.ndarray, state: int) -> np.ndarray:
    out = np.array(x, dtype=float)
    out[_BELIEF:] = oracle_belief(state)
    return out


# -- network -----------------------------------------------------------------

@dataclass
class MLP:
    """Fully connected ReLU network; ``weights[i]`` has shape (fan_in, fan_out)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def create(cls, sizes, rng: np.random.Generator) -> "MLP":
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            ws.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return cls(ws, bs)

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def load_from(self, other: "MLP") -> None:
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src

    def forward(self, x: np.ndarray, keep: bool = False):
        h = np.atleast_2d(x)
        acts = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return (h, acts) if keep else h

    def backward(self, acts: list[np.ndarray], dout: np.ndarray) -> list[np.ndarray]:
        """Gradients in ``params()`` order for d(loss)/d(output) = ``dout``."""
        grads: list[np.ndarray] = []
        g = dout
        for i in range(len(self.weights) - 1, -1, -1):
            grads.append(g.sum(axis=0))              # bias
            grads.append(acts[i].T @ g)              # weight
            if i > 0:
                g = (g @ self.weights[i].T) * (acts[i] > 0.0)
        return grads[::-1]


def q_forward(net: MLP, x: np.ndarray) -> np.ndarray:
    return net.forward(x)[0] if np.ndim(x) == 1 else net.forward(x)


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr, self.betas, self.eps = params, lr, betas, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def huber(err: np.ndarray, delta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise Huber loss and its derivative."""
    a = np.abs(err)
    quad = a <= delta
    loss = np.where(quad, 0.5 * err * err, delta * (a - 0.5 * delta))
    grad = np.where(quad, err, delta * np.sign(err))
    return loss, grad


def loss_and_grads(net: MLP, x: np.ndarray, actions: np.ndarray, targets: np.ndarray,
                   delta: float = 1.0) -> tuple[float, list[np.ndarray]]:
    """Mean Huber loss of Q(x, a) against fixed targets, with its gradients."""
    q, acts = net.forward(x, keep=True)
    idx = np.arange(len(actions))
    loss, dl = huber(q[idx, actions] - targets, delta)
    dout = np.zeros_like(q)
    dout[idx, actions] = dl / len(actions)
    return float(loss.mean()), net.backward(acts, dout)


def clip_grads(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global norm of at most ``max_norm``; returns the raw norm."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def double_dqn_targets(online: MLP, target: MLP, rewards, next_x, terminal, gamma: float) -> np.ndarray:
    """r + γ·Q_target(s', argmax_a Q_online(s', a)); just r when terminal."""
    rewards = np.asarray(rewards, dtype=float)
    terminal = np.asarray(terminal, dtype=bool)
    best = np.argmax(online.forward(next_x), axis=1)
    q_next = target.forward(next_x)[np.arange(len(best)), best]
    return rewards + gamma * np.where(terminal, 0.0, q_next)


# -- replay ------------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity FIFO store of (x, a, r, x', terminal)."""

    def __init__(self, capacity: int, dim: int = INPUT_DIM):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity, self.dim = capacity, dim
        self.x = np.zeros((capacity, dim))
        self.next_x = np.zeros((capacity, dim))
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.clear()

    def clear(self) -> None:
        self.size = 0
        self.head = 0       # next slot to write; also the oldest entry once full

    def __len__(self) -> int:
        return self.size

    def add(self, x, a: int, r: float, next_x, terminal: bool) -> None:
        i = self.head
        self.x[i], self.a[i], self.r[i], self.next_x[i], self.terminal[i] = x, a, r, next_x, terminal
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def ordered_rewards(self) -> np.ndarray:
        """Stored rewards oldest first (handy for checking eviction order)."""
        start = self.head if self.size == self.capacity else 0
        idx = (start + np.arange(self.size)) % self.capacity
        return self.r[idx].copy()

    def sample(self, n: int, rng: np.random.Generator):
        if n > self.size:
            raise ValueError(f"cannot sample {n} from {self.size} transitions")
        idx = rng.choice(self.size, size=n, replace=False)
        return self.x[idx], self.a[idx], self.r[idx], self.next_x[idx], self.terminal[idx]


def epsilon(step: int, cfg: TrainConfig = TrainConfig()) -> float:
    if step >= cfg.eps_steps:
        return cfg.eps_end
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * step / cfg.eps_steps


# -- agent -------------------------------------------------------------------

class DQNAgent:
    def __init__(self, cfg: TrainConfig = TrainConfig(), input_dim: int = INPUT_DIM):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.online = MLP.create((input_dim,) + tuple(cfg.hidden) + (N_ACTIONS,), self.rng)
        self.target = self.online.copy()
        self.opt = Adam(self.online.params(), cfg.lr, cfg.adam_betas, cfg.adam_eps)
        self.buffer = ReplayBuffer(cfg.buffer_capacity, input_dim)
        self.env_steps = 0
        self.grad_steps = 0

    def greedy(self, x: np.ndarray) -> int:
        return int(np.argmax(q_forward(self.online, x)))

    def act(self, x: np.ndarray) -> int:
        """ε-greedy action; advances the exploration schedule."""
        eps = epsilon(self.env_steps, self.cfg)
        self.env_steps += 1
        if self.rng.random() < eps:
            return int(self.rng.integers(N_ACTIONS))
        return self.greedy(x)

    def train_step(self) -> float | None:
        cfg = self.cfg
        if len(self.buffer) < cfg.batch_size:
            log.debug("replay buffer holds %d < %d transitions; skipping update", len(self.buffer), cfg.batch_size)
            return None
        x, a, r, nx, term = self.buffer.sample(cfg.batch_size, self.rng)
        y = double_dqn_targets(self.online, self.target, r, nx, term, cfg.gamma)
        loss, grads = loss_and_grads(self.online, x, a, y, cfg.huber_delta)
        clip_grads(grads, cfg.grad_clip)
        self.opt.step(grads)
        self.grad_steps += 1
        if self.grad_steps % cfg.target_sync == 0:
            self.target.load_from(self.online)
        return loss


# -- shaping and baselines ---------------------------------------------------

def shaping(belief: np.ndarray, true_state: int, trap_flag: bool, action: int,
            gap_category: int, own_ers: int) -> float:
    """Potential term added (times λ) to the reward during synthetic training."""
    phi = 0.0
    if int(map_state(belief)) == int(true_state):
        phi += 0.10
    if trap_flag and action == BURN:
        phi -= 0.20
    if gap_category in (CLOSE, THREAT) and ers_at_least_m(own_ers):
        phi += 0.05
    return phi


def baseline_b1(obs: Observation, gaps: GapThresholds = GapThresholds()) -> int:
    """Burn iff the car ahead is close or threatening and own ERS is at least M."""
    if gaps.category(obs.ego.gap_ahead) in (CLOSE, THREAT) and ers_at_least_m(obs.ego.ers):
        return BURN
    return HARVEST


def baseline_b2(obs: Observation, gaps: GapThresholds = GapThresholds()) -> int:
    """B1, and only when the rival's last trap-speed delta is negative."""
    if baseline_b1(obs, gaps) == BURN and obs.rival_raw is not None and obs.rival_raw[0] < 0.0:
        return BURN
    return HARVEST


def network_policy(net: MLP, belief_source: str = "hmm", gaps: GapThresholds = GapThresholds()):
    """Greedy policy of ``net``; ``belief_source="oracle"`` gives B3, "hmm" gives B4."""
    if belief_source not in ("hmm", "oracle"):
        raise ValueError(f"unknown belief source {belief_source!r}")

    def act(obs: Observation) -> int:
        if belief_source == "oracle":
            if obs.rival_state is None or obs.rival_state < 0:
                raise ValueError("the oracle policy needs the simulator's true rival state")
            x = encode_input(obs, oracle_belief(obs.rival_state), gaps)
        else:
            x = encode_input(obs, gaps=gaps)
        return int(np.argmax(q_forward(net, x)))

    return act


def baseline_policy(kind: str, net: MLP | None = None, gaps: GapThresholds = GapThresholds()):
    if kind == "B1":
        return lambda obs: baseline_b1(obs, gaps)
    if kind == "B2":
        return lambda obs: baseline_b2(obs, gaps)
    if kind in ("B3", "B4"):
        if net is None:
            raise ValueError(f"{kind} needs a trained network")
        return network_policy(net, "oracle" if kind == "B3" else "hmm", gaps)
    raise ValueError(f"unknown policy {kind!r}")


# -- training ----------------------------------------------------------------

@dataclass
class TrainHistory:
    race_returns: list[float] = field(default_factory=list)
    race_positions: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    selection: list[tuple[int, float]] = field(default_factory=list)   # (races trained, held-out return)
    selected_after: int | None = None


def run_training_race(agent: DQNAgent, env: DuelEnv, seed: int, profile: str,
                      gaps: GapThresholds = GapThresholds(), learn: bool = True,
                      losses: list | None = None, belief_source: str | None = None) -> tuple[float, int]:
    """One ε-greedy race, storing transitions as their lookahead reward resolves.

    ``belief_source`` ("hmm" or "oracle") defaults to the agent's setting;
    a "mixed" agent runs a lone race on HMM beliefs.
    """
    cfg = agent.cfg
    source = cfg.belief_source if belief_source is None else belief_source
    if belief_source is None and source == "mixed":
        source = "hmm"
    if source not in ("hmm", "oracle"):
        raise ValueError(f"a race needs belief_source 'hmm' or 'oracle', got {source!r}")
    obs = env.reset(seed, profile)
    xs, acts, phis, gained = [], [], [], []

    def encode(o: Observation) -> np.ndarray:
        b = oracle_belief(o.rival_state) if source == "oracle" else None
        return encode_input(o, b, gaps)

    def push(i: int, terminal: bool) -> None:
        g = np.asarray(gained[i:i + cfg.horizon], dtype=float)
        r = float(np.sum(cfg.reward_gamma ** np.arange(1, len(g) + 1) * g))
        agent.buffer.add(xs[i], acts[i], r + cfg.shaping_lambda * phis[i], xs[i + 1], terminal)

    x = encode(obs)
    xs.append(x)
    done = False
    while not done:
        a = agent.act(x)
        nobs, info, done = env.step(a)
        phis.append(shaping(obs.belief, obs.rival_state, nobs.trap_flag, a,
                            gaps.category(obs.ego.gap_ahead), obs.ego.ers))
        acts.append(a)
        gained.append(info.gained)
        obs, x = nobs, encode(nobs)
        xs.append(x)
        k = len(acts) - cfg.horizon
        if k >= 0 and not done:
            push(k, False)
        if learn and agent.env_steps % cfg.train_every == 0:
            loss = agent.train_step()
            if loss is not None and losses is not None and agent.grad_steps % 100 == 0:
                losses.append(loss)
    n = len(acts)
    for i in range(max(n - cfg.horizon, 0), n):
        push(i, i == n - 1)
    ret = float(lookahead_rewards(gained, cfg.horizon, cfg.reward_gamma).sum())
    return ret, int(np.sum(gained))


def greedy_return(net: MLP, env: DuelEnv, seeds, belief_source: str = "hmm",
                  gaps: GapThresholds = GapThresholds()) -> float:
    """Mean episode return of the greedy policy over ``seeds``, cycling the rival profiles."""
    policy = network_policy(net, belief_source, gaps)
    rets = []
    for i, seed in enumerate(seeds):
        obs = env.reset(seed, PROFILE_ORDER[i % len(PROFILE_ORDER)])
        gained, done = [], False
        while not done:
            obs, info, done = env.step(policy(obs))
            gained.append(info.gained)
        rets.append(lookahead_rewards(gained, env.cfg.horizon, env.cfg.gamma).sum())
    return float(np.mean(rets))


def train_policy(env: DuelEnv, cfg: TrainConfig = TrainConfig(), agent: DQNAgent | None = None,
                 gaps: GapThresholds = GapThresholds(), progress=None) -> tuple[DQNAgent, TrainHistory]:
    """Pre-train on ``cfg.n_races`` synthetic races, cycling the rival profiles.

    With snapshot selection on, the agent comes back holding the best scoring
    weights (online and target both). Snapshots are scored with the belief
    sources they were trained on; a mixed run averages the two scores.
    """
    agent = agent if agent is not None else DQNAgent(cfg)
    hist = TrainHistory()
    val_seeds = range(cfg.select_seed_base, cfg.select_seed_base + cfg.select_races)
    best, best_score = None, -np.inf
    n_prof = len(PROFILE_ORDER)
    score_sources = ("hmm", "oracle") if cfg.belief_source == "mixed" else (cfg.belief_source,)
    for i in range(cfg.n_races):
        source = cfg.belief_source
        if source == "mixed":
            source = "oracle" if (i // n_prof) % 2 else "hmm"
        ret, pos = run_training_race(agent, env, cfg.train_seed_base + i, PROFILE_ORDER[i % n_prof],
                                     gaps, losses=hist.losses, belief_source=source)
        hist.race_returns.append(ret)
        hist.race_positions.append(pos)
        if progress is not None:
            progress(i, ret)
        last = i == cfg.n_races - 1
        explored = agent.env_steps >= cfg.eps_steps
        if cfg.select_every > 0 and explored and ((i + 1) % cfg.select_every == 0 or last):
            score = float(np.mean([greedy_return(agent.online, env, val_seeds, src, gaps) for src in score_sources]))
            hist.selection.append((i + 1, score))
            log.info("after %d races: held-out return %.3f", i + 1, score)
            if score > best_score:
                best, best_score, hist.selected_after = agent.online.copy(), score, i + 1
    if best is not None:
        agent.online.load_from(best)
        agent.target.load_from(best)
    return agent, hist


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"RHQNET"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, net: MLP, config: dict | None = None) -> None:
    """Magic, version, JSON config echo, layer shapes, then float64 weights row-major."""
    echo = json.dumps(config or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(echo)))
        fh.write(echo)
        fh.write(struct.pack("<I", len(net.weights)))
        for w in net.weights:
            fh.write(struct.pack("<II", *w.shape))
        for w, b in zip(net.weights, net.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[MLP, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a network checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, n_echo = struct.unpack_from("<II", data, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    config = json.loads(data[off:off + n_echo].decode())
    off += n_echo
    (n_layers,) = struct.unpack_from("<I", data, off)
    off += 4
    shapes = [struct.unpack_from("<II", data, off + 8 * i) for i in range(n_layers)]
    off += 8 * n_layers
    ws, bs = [], []
    for rows, cols in shapes:
        ws.append(np.frombuffer(data, "<f8", rows * cols, off).reshape(rows, cols).astype(float))
        off += 8 * rows * cols
        bs.append(np.frombuffer(data, "<f8", cols, off).astype(float))
        off += 8 * cols
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return MLP(ws, bs), config
