"""Ego-versus-rival duel used to train and compare energy policies.

The ego chases one rival (a simulated car following a strategy profile) and is
chased by a balanced car behind. Each sector the ego picks burn or harvest; its
ERS mode moves along the burn/harvest chain and its sector time comes from the
emission Δt_sector model plus a direct effect of the action. Gaps move by the
sector-time differences. Burning into a sector where the rival's trap fires
fails: the ego is held off, loses time and is left depleted. The pace model and all constants
here are inventions kept as config keys.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .belief import forward_step, initial_belief, trap_condition
from .circuit import CircuitConfig, MELBOURNE
from .emission import TSECTOR, EmissionParams, build_emission_params, build_tables, discretize_array
from .sim import PROFILES, GapProcess, RivalCar, SimConfig, StrategyProfile
from .states import (
    N_STATES,
    N_TYRE,
    ErsMode,
    HiddenState,
    MomStatus,
    TyreStage,
    state_index,
)
from .transition import T_BURN, T_HARVEST, TYRE_PERSISTENCE, TransitionModel, tyre_matrix

BURN, HARVEST = 0, 1
COMPOUNDS = ("soft", "medium", "hard")


@dataclass(frozen=True)
class DuelConfig:
    burn_gain: float = -0.30        # s gained by burning with ERS >= M
    harvest_cost: float = 0.10      # s lost while harvesting
    override_gain: float = -0.30    # extra s when Override fires within earn_gap
    earn_gap: float = 1.0
    overtake_gap: float = -0.2
    trap_reset_gap: float = 0.8
    # s lost when an attack runs into a trap: the rival answers at full deployment
    # with Override (L_derate vs H pace, 0.6 s, plus the 0.3 s Override gain).
    trap_time_loss: float = 0.9
    trap_ers: int = int(ErsMode.L_DERATE)
    arm_sectors: int = 3            # a fired trap stays armed for one lap
    start_gap_ahead: float = 1.5
    respawn_gap: tuple[float, float] = (1.0, 2.5)
    start_gap_behind: float = 1.5
    chaser_profile: str = "balanced"
    horizon: int = 5
    gamma: float = 0.95
    p_burn: float = 0.55            # inference-side burn prior for the belief filter

    def to_dict(self) -> dict:
        d = asdict(self)
        d["respawn_gap"] = list(self.respawn_gap)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DuelConfig":
        d = dict(d)
        if "respawn_gap" in d:
            d["respawn_gap"] = tuple(d["respawn_gap"])
        return cls(**d)


@dataclass
class EgoState:
    ers: int = int(ErsMode.H)
    mom: int = int(MomStatus.AVAILABLE)
    tyre: int = int(TyreStage.NEW)
    compound: int = 1
    gap_ahead: float = 1.5
    gap_behind: float = 1.5
    closure: float = 0.0            # change of gap_ahead over the last sector


@dataclass
class Observation:
    """Everything a policy may look at before choosing the next action."""

    ego: EgoState
    t: int
    lap: int
    sector: int
    n_laps: int
    belief: np.ndarray
    rival_raw: np.ndarray | None    # last continuous observation of the rival ahead
    rival_state: int                # true hidden state (oracle use only)
    trap_flag: bool                 # detector output on the last observed sector


@dataclass
class StepInfo:
    gained: int                     # positions gained this sector (+1 pass, -1 passed)
    armed: bool
    trap_fired: bool
    attack_failed: bool
    action: int


def ers_at_least_m(ers: int) -> bool:
    """The ordering H > M > {L_harvest, L_derate}; both L modes fail."""
    return ers in (ErsMode.H, ErsMode.M)


def step_ego(ego: EgoState, action: int, rival_time: float, chaser_time: float, armed: bool,
             params: EmissionParams, rng: np.random.Generator, cfg: DuelConfig = DuelConfig(),
             tyre_T: np.ndarray | None = None) -> tuple[EgoState, int, bool, bool]:
    """Advance the ego one sector.

    Returns (next state, positions gained, passed the rival, attack failed).
    """
    if action not in (BURN, HARVEST):
        raise ValueError(f"action must be 0 (burn) or 1 (harvest), got {action}")
    tyre_T = tyre_matrix(TYRE_PERSISTENCE) if tyre_T is None else tyre_T
    charged = ers_at_least_m(ego.ers)
    row = (T_BURN if action == BURN else T_HARVEST)[ego.ers]
    ers = int(rng.choice(4, p=row))
    tyre = int(rng.choice(N_TYRE, p=tyre_T[ego.tyre]))
    state = state_index(HiddenState(ErsMode(ers), MomStatus(ego.mom), TyreStage(tyre)))
    g = params.gaussian(TSECTOR, state)
    t_ego = rng.normal(g.mu, g.sigma)
    mom = ego.mom
    failed = armed and action == BURN
    if failed:
        # The rival answers the attack with the energy it saved.
        t_ego += cfg.trap_time_loss
        ers = cfg.trap_ers
    if action == BURN:
        if charged:
            t_ego += cfg.burn_gain
        if mom == MomStatus.AVAILABLE and ego.gap_ahead < cfg.earn_gap:
            t_ego += cfg.override_gain
            mom = int(MomStatus.SPENT)
    else:
        t_ego += cfg.harvest_cost

    gap_ahead = ego.gap_ahead + t_ego - rival_time
    gap_behind = ego.gap_behind + chaser_time - t_ego
    gained, passed = 0, False
    if failed:
        gap_ahead = max(gap_ahead, cfg.trap_reset_gap)
    elif gap_ahead < cfg.overtake_gap:
        gained += 1
        passed = True
    if gap_behind < cfg.overtake_gap:
        gained -= 1
    nxt = EgoState(ers, mom, tyre, ego.compound, gap_ahead, gap_behind, gap_ahead - ego.gap_ahead)
    return nxt, gained, passed, failed


class DuelEnv:
    """One race of ego decisions against a rival of a given profile."""

    def __init__(self, circuit: CircuitConfig = MELBOURNE, cfg: DuelConfig = DuelConfig(),
                 sim_cfg: SimConfig = SimConfig(), params: EmissionParams | None = None,
                 tables=None, model: TransitionModel | None = None, theta: float = 0.5):
        self.circuit, self.cfg, self.sim_cfg = circuit, cfg, sim_cfg
        self.params = params if params is not None else build_emission_params(circuit, w_active=sim_cfg.w_active)
        self.tables = tables if tables is not None else build_tables(self.params)
        self.model = model if model is not None else TransitionModel.default(cfg.p_burn)
        self.theta = theta
        self.tyre_T = tyre_matrix(TYRE_PERSISTENCE)

    # -- episode control --------------------------------------------------
    def reset(self, seed: int, profile: str | StrategyProfile) -> Observation:
        self.profile = PROFILES[profile] if isinstance(profile, str) else profile
        ss = np.random.SeedSequence(seed)
        ego_ss, chaser_ss, self._rival_ss = ss.spawn(3)
        self.rng = np.random.default_rng(ego_ss)
        self._chaser_ss = chaser_ss
        self.t = 0
        self._spawn_chaser(HiddenState(ErsMode.H, MomStatus.AVAILABLE, TyreStage.NEW))
        self.ego = EgoState(compound=int(self.rng.integers(len(COMPOUNDS))),
                            gap_ahead=self.cfg.start_gap_ahead, gap_behind=self.cfg.start_gap_behind)
        self._spawn_rival(HiddenState(ErsMode.H, MomStatus.AVAILABLE, TyreStage.NEW), initial_belief())
        self.done = False
        return self.observe()

    def _spawn_chaser(self, start: HiddenState) -> None:
        rng = np.random.default_rng(self._chaser_ss.spawn(1)[0])
        self.chaser = RivalCar(PROFILES[self.cfg.chaser_profile], self.circuit, self.params, rng, self.sim_cfg,
                               start=start, t0=self.t)
        self.chaser_gap = GapProcess(rng, self.sim_cfg.gap_mean, self.sim_cfg.gap_sd,
                                     self.sim_cfg.gap_reversion, self.sim_cfg.gap_floor)

    def _spawn_rival(self, start: HiddenState, belief: np.ndarray) -> None:
        rng = np.random.default_rng(self._rival_ss.spawn(1)[0])
        self.rival = RivalCar(self.profile, self.circuit, self.params, rng, self.sim_cfg, start=start, t0=self.t)
        self.rival_gap = GapProcess(rng, self.sim_cfg.gap_mean, self.sim_cfg.gap_sd,
                                    self.sim_cfg.gap_reversion, self.sim_cfg.gap_floor)
        self.belief = belief
        self.fresh_belief = True
        self.rival_raw = None
        self.rival_state = state_index(start)
        self.trap_flag = False
        self.last_trap = -10**9
        self.prev_rival_gap = np.inf

    def observe(self) -> Observation:
        spl = self.circuit.sectors_per_lap
        return Observation(ego=EgoState(**asdict(self.ego)), t=self.t, lap=self.t // spl,
                           sector=self.t % spl, n_laps=self.circuit.laps, belief=self.belief.copy(),
                           rival_raw=None if self.rival_raw is None else self.rival_raw.copy(),
                           rival_state=self.rival_state, trap_flag=self.trap_flag)

    def step(self, action: int) -> tuple[Observation, StepInfo, bool]:
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        cfg = self.cfg
        spl = self.circuit.sectors_per_lap
        sector = self.t % spl
        rival_gap = self.rival_gap.value if self.t == self.rival.t else self.rival_gap.step()
        out = self.rival.step(rival_gap, self.ego.gap_ahead)
        if out.trap_active:
            self.last_trap = self.t
        armed = self.t - self.last_trap < cfg.arm_sectors
        chaser_gap = self.chaser_gap.value if self.t == self.chaser.t else self.chaser_gap.step()
        chaser_time = float(self.chaser.step(self.ego.gap_behind, chaser_gap).raw[TSECTOR])
        rival_time = float(out.raw[TSECTOR])
        self.ego, gained, passed, failed = step_ego(self.ego, action, rival_time, chaser_time, armed,
                                            self.params, self.rng, cfg, self.tyre_T)
        # Override for the ego: earned at the detection point within earn_gap.
        if sector == self.circuit.detection_sector and self.ego.gap_ahead < cfg.earn_gap:
            self.ego.mom = int(MomStatus.AVAILABLE)
        chaser_passed = self.ego.gap_behind < cfg.overtake_gap
        if chaser_passed:
            self.ego.gap_behind = cfg.start_gap_behind

        # Belief update on the rival's sector observation.
        o = discretize_array(out.raw[None, :])[0]
        table = self.tables[1] if out.in_zone else self.tables[0]
        lik = table.likelihood(o)
        if self.fresh_belief:
            post = self.belief * lik
            post = post / post.sum() if post.sum() > 0 else self.belief
            self.fresh_belief = False
        else:
            prev_detect = (self.t - 1) % spl == self.circuit.detection_sector
            p_e = 1.0 if prev_detect and self.prev_rival_gap < self.sim_cfg.earn_gap else 0.0
            post, _ = forward_step(self.belief, self.model.matrix(p_e), lik)
        self.belief = post
        self.rival_raw = out.raw
        self.rival_state = int(out.state)
        self.trap_flag = trap_condition(post, out.z_aero, int(out.in_zone), self.theta).flagged
        self.prev_rival_gap = rival_gap

        if passed:
            lo, hi = cfg.respawn_gap
            self.ego.gap_ahead = float(self.rng.uniform(lo, hi))
            self.ego.closure = 0.0
            start = HiddenState(ErsMode.H, MomStatus.AVAILABLE, TyreStage(self.ego.tyre))
            b = np.zeros(N_STATES)
            b[state_index(start)] = 1.0
            self.t += 1
            self._spawn_rival(start, 0.999 * b + 0.001 / N_STATES)
        else:
            self.t += 1
        if chaser_passed:
            # The car that passed is gone; a fresh chaser on the ego's tyre stage takes its place.
            self._spawn_chaser(HiddenState(ErsMode.H, MomStatus.AVAILABLE, TyreStage(self.ego.tyre)))
        self.done = self.t >= self.circuit.n_sectors
        info = StepInfo(gained=gained, armed=bool(armed), trap_fired=bool(out.trap_active),
                        attack_failed=failed, action=action)
        return self.observe(), info, self.done


def lookahead_rewards(gained, horizon: int = 5, gamma: float = 0.95) -> np.ndarray:
    """Discounted positions gained over the next ``horizon`` sectors, per decision.

    Decision ``t`` is credited with ``sum_k gamma**k * gained[t + k - 1]`` for
    ``k = 1..horizon``, truncated at the end of the race.
    """
    g = np.asarray(gained, dtype=float)
    n = len(g)
    out = np.zeros(n)
    for k in range(1, min(horizon, n) + 1):
        out[: n - k + 1] += gamma ** k * g[k - 1:]
    return out
