"""Scoring of the inference layer and of the energy policies on synthetic races."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .belief import (
    DEFAULT_THETA_TRAP,
    earn_probabilities,
    ece,
    filter_sequence,
    map_state,
    marginals,
    sequence_likelihoods,
    trap_flags,
)
from .emission import VTRAP, ZAERO, EmissionParams, build_tables
from .env import BURN, DuelEnv, lookahead_rewards
from .sim import PROFILE_ORDER, RaceTrace, SimConfig, generate_dataset
from .states import ERS_OF, MOM_OF, TYRE_OF, ErsMode, TyreStage
from .transition import TransitionModel

MEAN_SHIFTS = (-0.20, -0.10, 0.0, 0.10, 0.20)
NOISE_INFLATIONS = (0.10, 0.20, 0.30)
THRESHOLDS = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5)


@dataclass
class InferenceMetrics:
    top1: float
    ers: float
    harvest_derate: float
    mom: float
    tyre_cliff: float
    trap_recall: float
    trap_fpr: float
    ece: float
    gap_to_oracle: float
    n_sectors: int
    n_trap_sectors: int
    n_nontrap_zone_sectors: int

    def to_dict(self) -> dict:
        return asdict(self)


def _rate(mask: np.ndarray) -> float:
    return float(mask.mean()) if mask.size else float("nan")


def score_beliefs(beliefs, states, z_aero, in_zone, trap_active,
                  theta: float = DEFAULT_THETA_TRAP, oracle_ers_accuracy: float = 1.0) -> InferenceMetrics:
    """Score stacked per-sector beliefs against the true states.

    Harvest/derate accuracy only looks at sectors whose true ERS mode is one of
    the two L modes and asks which of the two carries more mass. The trap
    false-positive rate is taken over zone sectors without a trap.
    """
    b = np.asarray(beliefs, dtype=float)
    s = np.asarray(states, dtype=int)
    in_zone = np.asarray(in_zone, dtype=bool)
    trap = np.asarray(trap_active, dtype=bool)
    e, m, t = marginals(b)
    true_e = ERS_OF[s]
    ers_hit = e.argmax(axis=1) == true_e
    low = true_e >= ErsMode.L_HARVEST
    hd = (e[low, ErsMode.L_HARVEST] > e[low, ErsMode.L_DERATE]) == (true_e[low] == ErsMode.L_HARVEST)
    cliff = TYRE_OF[s] == TyreStage.CLIFF
    flags = trap_flags(b, z_aero, in_zone, theta)
    nontrap = in_zone & ~trap
    ers_acc = _rate(ers_hit)
    return InferenceMetrics(
        top1=_rate(map_state(b) == s),
        ers=ers_acc,
        harvest_derate=_rate(hd),
        mom=_rate(m.argmax(axis=1) == MOM_OF[s]),
        tyre_cliff=_rate(t[cliff].argmax(axis=1) == TyreStage.CLIFF),
        trap_recall=_rate(flags[trap]),
        trap_fpr=_rate(flags[nontrap]),
        ece=ece(e.max(axis=1), ers_hit, 15),
        gap_to_oracle=ers_acc / oracle_ers_accuracy,
        n_sectors=int(len(s)),
        n_trap_sectors=int(trap.sum()),
        n_nontrap_zone_sectors=int(nontrap.sum()),
    )


@dataclass
class FilteredCars:
    """Beliefs and ground truth for every rival of every race, stacked."""

    beliefs: np.ndarray
    states: np.ndarray
    z_aero: np.ndarray
    in_zone: np.ndarray
    trap_active: np.ndarray
    loglik: float


def filter_traces(traces: list[RaceTrace], tables, model: TransitionModel, use_gaps: bool = True,
                  z_override=None) -> FilteredCars:
    """Run the forward filter on each rival.

    With ``use_gaps`` the Override earn probability per sector is read off the
    observed gap at the detection point; otherwise the model's prior is used.
    ``z_override(race_index, car)`` may replace the z_aero column.
    """
    parts = {k: [] for k in ("beliefs", "states", "z_aero", "in_zone", "trap_active")}
    loglik = 0.0
    for ri, race in enumerate(traces):
        sil = race.sector_in_lap()
        det = race.circuit.detection_sector
        for car in race.cars:
            bins = car.bins
            z = car.z_aero
            if z_override is not None:
                z = np.asarray(z_override(ri, car), dtype=int)
                bins = bins.copy()
                bins[:, ZAERO] = z
            lik = sequence_likelihoods(bins, car.in_zone, tables)
            p_e = earn_probabilities(car.gap_ahead, sil, det, race.sim_config.earn_gap) if use_gaps else None
            res = filter_sequence(lik, model, p_e)
            loglik += res.loglik
            for k, v in (("beliefs", res.beliefs), ("states", car.state), ("z_aero", z),
                         ("in_zone", car.in_zone), ("trap_active", car.trap_active)):
                parts[k].append(v)
    return FilteredCars(**{k: np.concatenate(v) for k, v in parts.items()}, loglik=loglik)


def evaluate_inference(traces: list[RaceTrace], tables, model: TransitionModel,
                       theta: float = DEFAULT_THETA_TRAP, use_gaps: bool = True) -> InferenceMetrics:
    f = filter_traces(traces, tables, model, use_gaps)
    return score_beliefs(f.beliefs, f.states, f.z_aero, f.in_zone, f.trap_active, theta)


# -- robustness to emission misspecification ---------------------------------

@dataclass
class SweepResult:
    label: str
    mean_scale: float
    sigma_scale: float
    metrics: InferenceMetrics

    def to_dict(self) -> dict:
        return {"label": self.label, "mean_scale": self.mean_scale, "sigma_scale": self.sigma_scale,
                **self.metrics.to_dict()}


def perturbation_grid(mean_shifts=MEAN_SHIFTS, noise_inflations=NOISE_INFLATIONS):
    grid = []
    for d in mean_shifts:
        grid.append(("baseline" if d == 0 else f"mean {d:+.0%}", 1.0 + d, 1.0))
    for d in noise_inflations:
        grid.append((f"noise {d:+.0%}", 1.0, 1.0 + d))
    return grid


def robustness_sweep(traces: list[RaceTrace], params: EmissionParams, model: TransitionModel,
                     side: str = "inference", mean_shifts=MEAN_SHIFTS, noise_inflations=NOISE_INFLATIONS,
                     theta: float = DEFAULT_THETA_TRAP, n_races: int | None = None,
                     base_seed: int = 2026, sim_cfg: SimConfig | None = None) -> list[SweepResult]:
    """ERS accuracy and friends under scaled emission means or noise.

    ``side="inference"`` keeps the data fixed and perturbs the filter's
    tables. ``side="generator"`` instead regenerates the races from perturbed
    parameters (same seeds) and filters them with the unperturbed tables.
    """
    if side not in ("inference", "generator"):
        raise ValueError(f"side must be 'inference' or 'generator', got {side!r}")
    out = []
    base_tables = build_tables(params)
    for label, ms, ss in perturbation_grid(mean_shifts, noise_inflations):
        pert = params.perturbed(ms, ss)
        if side == "inference":
            data, tables = traces, (base_tables if (ms, ss) == (1.0, 1.0) else build_tables(pert))
        else:
            circuit = traces[0].circuit
            cfg = sim_cfg if sim_cfg is not None else traces[0].sim_config
            n = len(traces) if n_races is None else n_races
            data = generate_dataset(circuit, n, base_seed, cfg, params=pert)
            tables = base_tables
        out.append(SweepResult(label, ms, ss, evaluate_inference(data, tables, model, theta)))
    return out


# -- Active Aero threshold sweep ---------------------------------------------

@dataclass
class ThresholdPoint:
    threshold: float
    recall: float
    fpr: float


def vtrap_residual(car, params: EmissionParams) -> np.ndarray:
    """Observed Δv_trap minus its expected value without Active Aero.

    The expectation uses the car's true state, and the Override-active mean on
    sectors where Override fired.
    """
    mu = params.vtrap_mu[car.state]
    mu = np.where(car.mom_activated, params.active_vtrap[0], mu)
    return car.raw[:, VTRAP] - mu


def threshold_sweep(traces: list[RaceTrace], tables, model: TransitionModel, params: EmissionParams,
                    thresholds=THRESHOLDS, theta: float = DEFAULT_THETA_TRAP) -> list[ThresholdPoint]:
    """Re-derive z_aero as "zone and residual above the threshold", then re-run the detector."""
    residuals = {(ri, c.car): vtrap_residual(c, params) for ri, r in enumerate(traces) for c in r.cars}
    out = []
    for thr in thresholds:
        f = filter_traces(traces, tables, model,
                          z_override=lambda ri, c: c.in_zone & (residuals[ri, c.car] > thr))
        flags = trap_flags(f.beliefs, f.z_aero, f.in_zone, theta)
        out.append(ThresholdPoint(float(thr), _rate(flags[f.trap_active]),
                                  _rate(flags[f.in_zone & ~f.trap_active])))
    return out


# -- policy comparison -------------------------------------------------------

@dataclass
class PolicyResult:
    name: str
    mean_return: float
    mean_positions: float
    overtakes: int
    times_passed: int
    failed_attacks: int
    trap_sectors: int               # sectors in which the rival ahead fired a trap
    trap_sector_burns: int
    armed_sectors: int              # trap sectors plus the sectors the trap stays armed
    armed_burns: int
    burn_fraction: float
    returns: list[float] = field(default_factory=list)

    @property
    def trap_sector_burn_rate(self) -> float:
        return self.trap_sector_burns / self.trap_sectors if self.trap_sectors else float("nan")

    @property
    def armed_burn_rate(self) -> float:
        return self.armed_burns / self.armed_sectors if self.armed_sectors else float("nan")

    def to_dict(self, with_returns: bool = False) -> dict:
        d = asdict(self)
        d["trap_sector_burn_rate"] = self.trap_sector_burn_rate
        d["armed_burn_rate"] = self.armed_burn_rate
        if not with_returns:
            d.pop("returns")
        return d


def run_policy_race(env: DuelEnv, policy, seed: int, profile: str) -> dict:
    obs = env.reset(seed, profile)
    gained, actions, armed, fired, failed = [], [], [], [], 0
    done = False
    while not done:
        a = policy(obs)
        obs, info, done = env.step(a)
        gained.append(info.gained)
        actions.append(a)
        armed.append(info.armed)
        fired.append(info.trap_fired)
        failed += info.attack_failed
    g = np.asarray(gained)
    act = np.asarray(actions)
    arm = np.asarray(armed, dtype=bool)
    trap = np.asarray(fired, dtype=bool)
    return {
        "return": float(lookahead_rewards(g, env.cfg.horizon, env.cfg.gamma).sum()),
        "positions": int(g.sum()), "overtakes": int((g > 0).sum()), "passed": int((g < 0).sum()),
        "failed": failed, "traps": int(trap.sum()), "trap_burns": int((act[trap] == BURN).sum()),
        "armed": int(arm.sum()), "armed_burns": int((act[arm] == BURN).sum()),
        "burns": int((act == BURN).sum()), "steps": len(act),
    }


def evaluate_policies(env: DuelEnv, policies: dict, seeds, profiles=PROFILE_ORDER) -> dict[str, PolicyResult]:
    """Every policy races the same (seed, profile) pairs."""
    seeds = list(seeds)
    out = {}
    for name, policy in policies.items():
        rows = [run_policy_race(env, policy, s, profiles[i % len(profiles)]) for i, s in enumerate(seeds)]
        rets = [r["return"] for r in rows]
        steps = sum(r["steps"] for r in rows)
        out[name] = PolicyResult(
            name=name, mean_return=float(np.mean(rets)),
            mean_positions=float(np.mean([r["positions"] for r in rows])),
            overtakes=sum(r["overtakes"] for r in rows), times_passed=sum(r["passed"] for r in rows),
            failed_attacks=sum(r["failed"] for r in rows), trap_sectors=sum(r["traps"] for r in rows),
            trap_sector_burns=sum(r["trap_burns"] for r in rows),
            armed_sectors=sum(r["armed"] for r in rows), armed_burns=sum(r["armed_burns"] for r in rows),
            burn_fraction=sum(r["burns"] for r in rows) / steps if steps else float("nan"),
            returns=rets,
        )
    return out


# -- reports -----------------------------------------------------------------

TABLE3_ROWS = (
    ("Top-1 state accuracy", "top1"),
    ("ERS-level accuracy", "ers"),
    ("Harvest vs derate accuracy", "harvest_derate"),
    ("Override status accuracy", "mom"),
    ("Tyre cliff detection", "tyre_cliff"),
    ("Trap recall", "trap_recall"),
    ("Trap false positive rate", "trap_fpr"),
    ("Expected calibration error", "ece"),
    ("Gap to oracle (ERS level)", "gap_to_oracle"),
)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def write_table3(path, m: InferenceMetrics) -> None:
    d = m.to_dict()
    write_csv(path, ["metric", "key", "value"], [(label, key, d[key]) for label, key in TABLE3_ROWS])


def write_table4(path, results: list[SweepResult]) -> None:
    base = next((r.metrics.ers for r in results if r.mean_scale == 1.0 and r.sigma_scale == 1.0), float("nan"))
    write_csv(path, ["perturbation", "mean_scale", "sigma_scale", "ers_accuracy", "delta_pp"],
              [(r.label, r.mean_scale, r.sigma_scale, r.metrics.ers, 100.0 * (r.metrics.ers - base))
               for r in results])


def write_table5(path, points: list[ThresholdPoint]) -> None:
    write_csv(path, ["threshold_kmh", "recall", "fpr"], [(p.threshold, p.recall, p.fpr) for p in points])


def write_policy_table(path, results: dict[str, PolicyResult]) -> None:
    cols = ["policy", "mean_return", "mean_positions", "overtakes", "times_passed", "failed_attacks",
            "trap_sectors", "trap_sector_burns", "trap_sector_burn_rate", "armed_sectors", "armed_burns",
            "armed_burn_rate", "burn_fraction"]
    rows = []
    for r in results.values():
        d = r.to_dict()
        rows.append([r.name] + [d[c] for c in cols[1:]])
    write_csv(path, cols, rows)


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
