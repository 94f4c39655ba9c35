"""Forward filtering over the 40-state rival model and the quantities read off it."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .emission import FactoredEmissionTable
from .states import ERS_OF, N_ERS, N_MOM, N_STATES, N_TYRE, ErsMode
from .transition import ComposedTransition, TransitionModel

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-3
DEFAULT_THETA_TRAP = 0.5


def initial_belief(eps: float = DEFAULT_EPS, n_states: int = N_STATES) -> np.ndarray:
    """Mass ``1 - eps`` on (H, available, new), the rest spread evenly."""
    b = np.full(n_states, eps / (n_states - 1))
    b[0] = 1.0 - eps
    return b


def _as_matrix(T) -> np.ndarray:
    return T.matrix if isinstance(T, ComposedTransition) else np.asarray(T)


def forward_step(prev: np.ndarray, T, lik: np.ndarray) -> tuple[np.ndarray, float]:
    """One predict/update step; returns the posterior and the normaliser.

    A zero normaliser means the observation is impossible under every
    predicted state. The prediction is returned instead and the normaliser is
    reported as 0 so callers can account for it.
    """
    pred = prev @ _as_matrix(T)
    alpha = pred * lik
    c = float(alpha.sum())
    if not c > 0.0:
        log.warning("observation has zero likelihood under the prediction; keeping prior")
        return pred / pred.sum(), 0.0
    return alpha / c, c


def forward_update(prev: np.ndarray, T, table: FactoredEmissionTable, o) -> np.ndarray:
    return forward_step(prev, T, table.likelihood(o))[0]


@dataclass
class FilterResult:
    beliefs: np.ndarray      # (n, 40) filtered posteriors
    log_scales: np.ndarray   # (n,) log normalisers
    loglik: float


def sequence_likelihoods(obs: np.ndarray, zone: np.ndarray,
                         tables: tuple[FactoredEmissionTable, FactoredEmissionTable]) -> np.ndarray:
    """Per-sector emission likelihoods ``(n, 40)``, picking the table by zone flag."""
    normal, zone_table = tables
    obs = np.asarray(obs, dtype=int)
    zone = np.asarray(zone, dtype=bool)
    lik = normal.likelihoods(obs)
    if zone.any():
        lik[zone] = zone_table.likelihoods(obs[zone])
    return lik


def earn_probabilities(gap_ahead, sector_in_lap, detection_sector: int,
                       threshold: float = 1.0) -> np.ndarray:
    """Per-transition Override earn probability from the observed gap.

    Entry ``t`` governs the move into sector ``t``: 1 when sector ``t-1`` was
    the detection point and the rival was within ``threshold`` of the car
    ahead, else 0. Entry 0 is unused.
    """
    gap_ahead = np.asarray(gap_ahead, dtype=float)
    sector_in_lap = np.asarray(sector_in_lap)
    p = np.zeros(len(gap_ahead))
    p[1:] = ((sector_in_lap[:-1] == detection_sector) & (gap_ahead[:-1] < threshold)).astype(float)
    return p


def filter_sequence(lik: np.ndarray, model: TransitionModel, p_e=None,
                    b0: np.ndarray | None = None) -> FilterResult:
    """Scaled forward pass. ``p_e`` is an optional per-sector earn probability."""
    n = len(lik)
    b = initial_belief() if b0 is None else np.asarray(b0, dtype=float)
    beliefs = np.empty((n, N_STATES))
    log_scales = np.empty(n)
    for t in range(n):
        if t == 0:
            alpha = b * lik[0]
            c = float(alpha.sum())
            post = alpha / c if c > 0 else b
        else:
            T = model.matrix(None if p_e is None else p_e[t])
            post, c = forward_step(beliefs[t - 1], T, lik[t])
        beliefs[t] = post
        log_scales[t] = np.log(c) if c > 0 else -np.inf
    return FilterResult(beliefs, log_scales, float(log_scales.sum()))


def marginals(b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(ERS, MOM, tyre) marginals; works on a single belief or a stack."""
    b = np.asarray(b)
    cube = b.reshape(b.shape[:-1] + (N_ERS, N_MOM, N_TYRE))
    return cube.sum(axis=(-2, -1)), cube.sum(axis=(-3, -1)), cube.sum(axis=(-3, -2))


def map_state(b: np.ndarray):
    """Most probable state; ties go to the lower index."""
    return np.argmax(b, axis=-1)


@dataclass(frozen=True)
class TrapDecision:
    p_harvest: float
    z_aero: int
    in_zone: int
    theta: float
    flagged: bool


def trap_condition(b: np.ndarray, z_aero: int, in_zone: int,
                   theta: float = DEFAULT_THETA_TRAP) -> TrapDecision:
    p_harvest = float(np.asarray(b)[ERS_OF == ErsMode.L_HARVEST].sum())
    flagged = p_harvest > theta and bool(z_aero) and bool(in_zone)
    return TrapDecision(p_harvest, int(z_aero), int(in_zone), theta, flagged)


def trap_flags(beliefs: np.ndarray, z_aero, in_zone, theta: float = DEFAULT_THETA_TRAP) -> np.ndarray:
    p_harvest = beliefs[:, ERS_OF == ErsMode.L_HARVEST].sum(axis=1)
    return (p_harvest > theta) & np.asarray(z_aero, dtype=bool) & np.asarray(in_zone, dtype=bool)


def ece(confidences, correct, n_bins: int = 15) -> float:
    """Expected calibration error with equal-width confidence bins."""
    conf = np.asarray(confidences, dtype=float)
    hit = np.asarray(correct, dtype=float)
    if conf.size == 0:
        raise ValueError("ECE needs at least one prediction")
    if np.any((conf < -1e-9) | (conf > 1 + 1e-9)):
        raise ValueError("confidences must lie in [0, 1]")
    conf = np.clip(conf, 0.0, 1.0)
    # Bin k covers (k/n, (k+1)/n]; a confidence of exactly 0 goes to bin 0.
    idx = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    total = 0.0
    for k in range(n_bins):
        sel = idx == k
        if sel.any():
            total += sel.mean() * abs(hit[sel].mean() - conf[sel].mean())
    return float(total)


def _belief_rows(beliefs: np.ndarray, flags=None, sectors=None, car=None):
    n = len(beliefs)
    sectors = np.arange(n) if sectors is None else sectors
    flags = np.zeros(n, dtype=bool) if flags is None else flags
    maps = map_state(beliefs)
    for t in range(n):
        row = [car] if car is not None else []
        yield row + [int(sectors[t])] + [repr(float(x)) for x in beliefs[t]] + [int(maps[t]), int(flags[t])]


def _belief_header(with_car: bool) -> list[str]:
    return (["car"] if with_car else []) + ["sector"] + [f"p{i}" for i in range(N_STATES)] + ["map", "trap"]


def write_belief_csv(path, beliefs: np.ndarray, flags=None, sectors=None, car=None) -> None:
    """Sector, 40 probabilities, MAP index, trap flag."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_belief_header(car is not None))
        w.writerows(_belief_rows(beliefs, flags, sectors, car))


def write_race_beliefs_csv(path, cars) -> None:
    """Several cars in one file; ``cars`` yields (car id, beliefs, flags)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_belief_header(True))
        for car, beliefs, flags in cars:
            w.writerows(_belief_rows(beliefs, flags, car=car))
