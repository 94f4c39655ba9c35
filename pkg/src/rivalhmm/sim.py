"""Synthetic race generator for rival cars.

Each rival follows a strategy profile: per sector it samples burn/harvest from
the profile's burn probability, advances its hidden (ERS, MOM, tyre) state
through the factored chains, and emits six noisy observables.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .circuit import CircuitConfig, MELBOURNE
from .emission import (
    DEFAULT_BINS,
    DTHROTTLE,
    SPEEDVAR,
    BinSpec,
    EmissionParams,
    build_emission_params,
    discretize_array,
    truncated_normal,
)
from .states import (
    N_TYRE,
    OBSERVABLES,
    ErsMode,
    HiddenState,
    MomStatus,
    TyreStage,
    state_decode,
    state_index,
)
from .transition import P_DEPLOY, T_BURN, T_HARVEST, TYRE_PERSISTENCE, tyre_matrix

BURN, HARVEST = 0, 1


@dataclass(frozen=True)
class StrategyProfile:
    name: str
    p_burn: float
    post_trap_p_burn: float | None = None
    sets_traps: bool = False


PROFILES = {
    "aggressive": StrategyProfile("aggressive", 0.75),
    "conservative": StrategyProfile("conservative", 0.35),
    "trap_setter": StrategyProfile("trap_setter", 0.30, post_trap_p_burn=0.90, sets_traps=True),
    "balanced": StrategyProfile("balanced", 0.55),
}
PROFILE_ORDER = ("aggressive", "conservative", "trap_setter", "balanced")


@dataclass(frozen=True)
class NoiseConfig:
    vtrap: float = 0.2
    tsector: float = 0.05
    bbrake: float = 1.0


@dataclass(frozen=True)
class SimConfig:
    """Generator knobs. Gap dynamics are a mean-reverting walk per rival."""

    noise: NoiseConfig = field(default_factory=NoiseConfig)
    gap_mean: float = 1.5
    gap_sd: float = 2.0
    gap_reversion: float = 0.3
    gap_floor: float = 0.05
    earn_gap: float = 1.0
    trap_gap: float = 1.5
    post_trap_sectors: int = 3
    w_active: float = 0.2
    n_rivals: int = 6
    # "deployed": the zone speed increment applies only when Active Aero is open;
    # "zone": it applies to every zone sector, as the zone emission table assumes.
    aero_shift: str = "deployed"
    # A trap-setter baiting the car behind holds its Override charge that sector.
    trap_holds_override: bool = True
    # When an available Override may fire: "proximity" (within earn_gap of the
    # car ahead), "detection" (only right after a close detection point), "always".
    deploy_gate: str = "proximity"
    # Sectors of forced harvesting on the approach to a zone before a trap.
    trap_setup_sectors: int = 1

    def __post_init__(self):
        if self.aero_shift not in ("deployed", "zone"):
            raise ValueError(f"aero_shift must be 'deployed' or 'zone', got {self.aero_shift!r}")
        if self.deploy_gate not in ("proximity", "detection", "always"):
            raise ValueError(f"unknown deploy_gate {self.deploy_gate!r}")
        if self.n_rivals < 1 or self.post_trap_sectors < 0 or self.trap_setup_sectors < 0:
            raise ValueError("n_rivals must be positive and sector counts non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if "noise" in d and isinstance(d["noise"], dict):
            d["noise"] = NoiseConfig(**d["noise"])
        return cls(**d)


def add_noise(clean, rng: np.random.Generator, noise: NoiseConfig = NoiseConfig()) -> np.ndarray:
    """Add i.i.d. Gaussian measurement noise to Δv_trap, Δt_sector, Δb_brake.

    σ²_speed, z_aero and δ_throttle come from truncated/Bernoulli draws and are
    only clipped back onto their supports.
    """
    out = np.array(clean, dtype=float, copy=True)
    single = out.ndim == 1
    out = np.atleast_2d(out)
    n = len(out)
    for k, sd in enumerate((noise.vtrap, noise.tsector, noise.bbrake)):
        if sd > 0:
            out[:, k] += rng.normal(0.0, sd, n)
    out[:, SPEEDVAR] = np.maximum(out[:, SPEEDVAR], 0.0)
    out[:, DTHROTTLE] = np.clip(out[:, DTHROTTLE], 0.0, 1.0)
    return out[0] if single else out


class GapProcess:
    """Mean-reverting gap (seconds) with a stationary N(mean, sd) law, floored."""

    def __init__(self, rng, mean, sd, reversion, floor, start=None):
        self.rng, self.mean, self.reversion, self.floor = rng, mean, reversion, floor
        self.step_sd = sd * np.sqrt(1.0 - (1.0 - reversion) ** 2)
        g = rng.normal(mean, sd) if start is None else start
        self.value = max(float(g), floor)

    def step(self) -> float:
        g = self.value + self.reversion * (self.mean - self.value) + self.rng.normal(0.0, self.step_sd)
        self.value = max(g, self.floor)
        return self.value


@dataclass
class SectorOutcome:
    state: int
    raw: np.ndarray
    in_zone: bool
    z_aero: int
    trap_active: bool
    mom_activated: bool
    action: int
    armed: bool


class RivalCar:
    """Hidden-state machine for one rival, advanced one sector at a time."""

    def __init__(self, profile: StrategyProfile, circuit: CircuitConfig, params: EmissionParams,
                 rng: np.random.Generator, cfg: SimConfig = SimConfig(),
                 start: HiddenState = HiddenState(ErsMode.H, MomStatus.AVAILABLE, TyreStage.NEW),
                 t0: int = 0):
        self.profile, self.circuit, self.params, self.rng, self.cfg = profile, circuit, params, rng, cfg
        self.ers, self.mom, self.tyre = int(start.ers), int(start.mom), int(start.tyre)
        self.tyre_T = tyre_matrix(TYRE_PERSISTENCE)
        self.post_trap_left = 0
        self.t = t0
        self.prev_gap_ahead = np.inf

    @property
    def state(self) -> int:
        return state_index(HiddenState(ErsMode(self.ers), MomStatus(self.mom), TyreStage(self.tyre)))

    def step(self, gap_ahead: float, gap_behind: float) -> SectorOutcome:
        """Advance into the next sector given this sector's gaps."""
        rng, cfg, circuit = self.rng, self.cfg, self.circuit
        sector = self.t % circuit.sectors_per_lap
        in_zone = circuit.is_zone(sector)

        post_trap = self.post_trap_left > 0
        p_burn = self.profile.p_burn
        if post_trap:
            self.post_trap_left -= 1
            if self.profile.post_trap_p_burn is not None:
                p_burn = self.profile.post_trap_p_burn
        action = BURN if rng.random() < p_burn else HARVEST

        activated = False
        if self.t > 0:
            row = (T_BURN if action == BURN else T_HARVEST)[self.ers]
            self.ers = int(rng.choice(4, p=row))
            # Override is gated on being within earn_gap of the car ahead at the
            # detection point: a spent car earns the charge back, an available
            # car deploys it with probability P_DEPLOY.
            close = (self.t - 1) % circuit.sectors_per_lap == circuit.detection_sector \
                and self.prev_gap_ahead < cfg.earn_gap
            trap_now = self._trap_fires(in_zone, gap_behind, post_trap)
            if self.mom == MomStatus.AVAILABLE and self._may_deploy(close, gap_ahead):
                if not (trap_now and cfg.trap_holds_override) and rng.random() < P_DEPLOY:
                    self.mom = MomStatus.SPENT
                    activated = True
            elif close and self.mom == MomStatus.SPENT:
                self.mom = MomStatus.AVAILABLE
            self.tyre = int(rng.choice(N_TYRE, p=self.tyre_T[self.tyre]))

        trap = self._trap_fires(in_zone, gap_behind, post_trap)
        if trap:
            self.ers = int(ErsMode.L_HARVEST)
            self.post_trap_left = cfg.post_trap_sectors
        elif self._sets_up_trap(sector, gap_behind, post_trap):
            self.ers = int(ErsMode.L_HARVEST)
        raw, z = self._emit(in_zone, activated, trap)

        self.prev_gap_ahead = gap_ahead
        self.t += 1
        return SectorOutcome(self.state, raw, in_zone, z, trap, activated, action, trap or post_trap)

    def _may_deploy(self, close: bool, gap_ahead: float) -> bool:
        gate = self.cfg.deploy_gate
        if gate == "detection":
            return close
        if gate == "proximity":
            return gap_ahead < self.cfg.earn_gap
        return True

    def _sets_up_trap(self, sector: int, gap_behind: float, post_trap: bool) -> bool:
        # The bait is laid by harvesting on the approach to the zone.
        n = self.cfg.trap_setup_sectors
        if n <= 0 or not self.profile.sets_traps or post_trap or gap_behind >= self.cfg.trap_gap:
            return False
        spl = self.circuit.sectors_per_lap
        return any(self.circuit.is_zone((sector + k) % spl) for k in range(1, n + 1))

    def _trap_fires(self, in_zone: bool, gap_behind: float, post_trap: bool) -> bool:
        return self.profile.sets_traps and in_zone and gap_behind < self.cfg.trap_gap and not post_trap

    def _emit(self, in_zone: bool, activated: bool, trap: bool) -> tuple[np.ndarray, int]:
        rng, p = self.rng, self.params
        s = self.state
        clean = np.empty(len(OBSERVABLES))
        for k in (0, 1, 2, 3, 5):
            g = p.gaussian(k, s, active=activated)
            if g.truncation is None:
                clean[k] = rng.normal(g.mu, g.sigma)
            else:
                clean[k] = truncated_normal(rng, g.mu, g.sigma, *g.truncation)
        z = 0
        if in_zone:
            z = 1 if trap else int(rng.random() < p.zaero_p[s])
            # Straight-line Active Aero adds its speed increment only when deployed.
            clean[0] += p.zone_shift * (z if self.cfg.aero_shift == "deployed" else 1)
        clean[4] = z
        return add_noise(clean, rng, self.cfg.noise), z


@dataclass
class CarTrace:
    car: int
    profile: str
    state: np.ndarray
    raw: np.ndarray
    bins: np.ndarray
    in_zone: np.ndarray
    z_aero: np.ndarray
    gap_ahead: np.ndarray
    gap_behind: np.ndarray
    trap_active: np.ndarray
    mom_activated: np.ndarray
    action: np.ndarray

    def __len__(self):
        return len(self.state)


@dataclass
class SectorRecord:
    lap: int
    sector: int
    car: int
    state: HiddenState
    raw: tuple
    obs: tuple
    in_zone: int
    z_aero: int
    gap_ahead: float
    gap_behind: float
    trap_active: int
    mom_activated: int


@dataclass
class RaceTrace:
    circuit: CircuitConfig
    seed: int
    cars: list[CarTrace]
    sim_config: SimConfig = field(default_factory=SimConfig)

    @property
    def n_records(self) -> int:
        return sum(len(c) for c in self.cars)

    def sector_in_lap(self) -> np.ndarray:
        return np.arange(self.circuit.n_sectors) % self.circuit.sectors_per_lap

    def records(self):
        spl = self.circuit.sectors_per_lap
        for c in self.cars:
            for t in range(len(c)):
                yield SectorRecord(
                    t // spl, t % spl, c.car, state_decode(int(c.state[t])), tuple(c.raw[t]),
                    tuple(int(x) for x in c.bins[t]), int(c.in_zone[t]), int(c.z_aero[t]),
                    float(c.gap_ahead[t]), float(c.gap_behind[t]), int(c.trap_active[t]),
                    int(c.mom_activated[t]))


def simulate_car(profile: StrategyProfile, circuit: CircuitConfig, params: EmissionParams,
                 rng: np.random.Generator, cfg: SimConfig, car: int,
                 bins: BinSpec = DEFAULT_BINS) -> CarTrace:
    n = circuit.n_sectors
    ahead = GapProcess(rng, cfg.gap_mean, cfg.gap_sd, cfg.gap_reversion, cfg.gap_floor)
    behind = GapProcess(rng, cfg.gap_mean, cfg.gap_sd, cfg.gap_reversion, cfg.gap_floor)
    rival = RivalCar(profile, circuit, params, rng, cfg)
    cols = {k: [] for k in ("state", "raw", "in_zone", "z_aero", "gap_ahead", "gap_behind",
                            "trap_active", "mom_activated", "action")}
    for t in range(n):
        ga = ahead.value if t == 0 else ahead.step()
        gb = behind.value if t == 0 else behind.step()
        out = rival.step(ga, gb)
        for key, val in (("state", out.state), ("raw", out.raw), ("in_zone", out.in_zone),
                         ("z_aero", out.z_aero), ("gap_ahead", ga), ("gap_behind", gb),
                         ("trap_active", out.trap_active), ("mom_activated", out.mom_activated),
                         ("action", out.action)):
            cols[key].append(val)
    raw = np.asarray(cols["raw"])
    return CarTrace(
        car=car, profile=profile.name,
        state=np.asarray(cols["state"], dtype=int), raw=raw, bins=discretize_array(raw, bins),
        in_zone=np.asarray(cols["in_zone"], dtype=bool), z_aero=np.asarray(cols["z_aero"], dtype=int),
        gap_ahead=np.asarray(cols["gap_ahead"]), gap_behind=np.asarray(cols["gap_behind"]),
        trap_active=np.asarray(cols["trap_active"], dtype=bool),
        mom_activated=np.asarray(cols["mom_activated"], dtype=bool),
        action=np.asarray(cols["action"], dtype=int),
    )


def simulate_race(circuit: CircuitConfig, profiles, seed: int, cfg: SimConfig = SimConfig(),
                  params: EmissionParams | None = None, bins: BinSpec = DEFAULT_BINS) -> RaceTrace:
    """Simulate every rival for a full race. Deterministic given ``seed``."""
    profiles = [PROFILES[p] if isinstance(p, str) else p for p in profiles]
    if len(profiles) != cfg.n_rivals:
        raise ValueError(f"expected {cfg.n_rivals} rival profiles, got {len(profiles)}")
    if params is None:
        params = build_emission_params(circuit, w_active=cfg.w_active)
    streams = np.random.SeedSequence(seed).spawn(len(profiles))
    cars = [simulate_car(p, circuit, params, np.random.default_rng(ss), cfg, i, bins)
            for i, (p, ss) in enumerate(zip(profiles, streams))]
    return RaceTrace(circuit, seed, cars, cfg)


def dataset_schedule(n_races: int = 20, base_seed: int = 2026) -> list[tuple[str, int]]:
    """(profile, seed) per race: equal blocks per profile, consecutive seeds."""
    per = max(n_races // len(PROFILE_ORDER), 1)
    return [(PROFILE_ORDER[min(i // per, len(PROFILE_ORDER) - 1)], base_seed + i) for i in range(n_races)]


def generate_dataset(circuit: CircuitConfig = MELBOURNE, n_races: int = 20, base_seed: int = 2026,
                     cfg: SimConfig = SimConfig(), params: EmissionParams | None = None) -> list[RaceTrace]:
    """Five races per profile by default; ``params`` overrides the generator's emission model."""
    if params is None:
        params = build_emission_params(circuit, w_active=cfg.w_active)
    return [simulate_race(circuit, [profile] * cfg.n_rivals, seed, cfg, params)
            for profile, seed in dataset_schedule(n_races, base_seed)]


# --- serialisation -------------------------------------------------------

RACE_COLUMNS = (
    ["car", "lap", "sector", "state"]
    + [f"raw_{k}" for k in OBSERVABLES]
    + [f"bin_{k}" for k in OBSERVABLES]
    + ["in_zone", "z_aero", "gap_ahead", "gap_behind", "trap_active", "mom_activated", "action"]
)


def write_race(trace: RaceTrace, csv_path, json_path=None) -> None:
    csv_path = Path(csv_path)
    json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
    spl = trace.circuit.sectors_per_lap
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RACE_COLUMNS)
        for c in trace.cars:
            for t in range(len(c)):
                w.writerow([c.car, t // spl, t % spl, int(c.state[t])]
                           + [repr(float(x)) for x in c.raw[t]]
                           + [int(x) for x in c.bins[t]]
                           + [int(c.in_zone[t]), int(c.z_aero[t]), repr(float(c.gap_ahead[t])),
                              repr(float(c.gap_behind[t])), int(c.trap_active[t]),
                              int(c.mom_activated[t]), int(c.action[t])])
    meta = {
        "format": "rivalhmm-race", "version": 1, "seed": trace.seed,
        "circuit": trace.circuit.to_dict(), "sim_config": trace.sim_config.to_dict(),
        "profiles": [c.profile for c in trace.cars], "columns": RACE_COLUMNS,
    }
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_race(csv_path, json_path=None) -> RaceTrace:
    csv_path = Path(csv_path)
    json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
    meta = json.loads(json_path.read_text())
    data = np.genfromtxt(csv_path, delimiter=",", names=True, dtype=float)
    circuit = CircuitConfig.from_dict(meta["circuit"])
    cars = []
    for i, profile in enumerate(meta["profiles"]):
        d = data[data["car"] == i]
        raw = np.column_stack([d[f"raw_{k}"] for k in OBSERVABLES])
        cars.append(CarTrace(
            car=i, profile=profile, state=d["state"].astype(int), raw=raw,
            bins=np.column_stack([d[f"bin_{k}"] for k in OBSERVABLES]).astype(int),
            in_zone=d["in_zone"].astype(bool), z_aero=d["z_aero"].astype(int),
            gap_ahead=d["gap_ahead"], gap_behind=d["gap_behind"],
            trap_active=d["trap_active"].astype(bool), mom_activated=d["mom_activated"].astype(bool),
            action=d["action"].astype(int),
        ))
    return RaceTrace(circuit, int(meta["seed"]), cars, SimConfig.from_dict(meta["sim_config"]))

