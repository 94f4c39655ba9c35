"""Factored transition model: ERS x Override Mode x tyre chains."""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .states import ErsMode, N_ERS, N_TYRE

# Rows/cols ordered H, M, L_harvest, L_derate.
T_BURN = np.array([
    [0.60, 0.35, 0.03, 0.02],
    [0.05, 0.55, 0.25, 0.15],
    [0.00, 0.25, 0.50, 0.25],
    [0.00, 0.05, 0.15, 0.80],
])
T_HARVEST = np.array([
    [0.95, 0.05, 0.00, 0.00],
    [0.60, 0.35, 0.03, 0.02],
    [0.30, 0.55, 0.15, 0.00],
    [0.00, 0.45, 0.30, 0.25],
])
for _m in (T_BURN, T_HARVEST):
    _m.setflags(write=False)

P_DEPLOY = 0.60
P_EARN_PRIOR = 0.25
TYRE_PERSISTENCE = (23 / 24, 20 / 21, 14 / 15, 14 / 15, 1.0)
DEFAULT_P_BURN = 0.55


def ers_rows(p_burn: float) -> np.ndarray:
    if not 0.0 <= p_burn <= 1.0:
        raise ValueError(f"p_burn must be in [0, 1], got {p_burn}")
    return p_burn * T_BURN + (1.0 - p_burn) * T_HARVEST


def marginal_ers(e: ErsMode | int, p_burn: float) -> np.ndarray:
    """Next-ERS distribution from ``e`` with the rival's action marginalised out."""
    return ers_rows(p_burn)[int(e)]


def mom_idle(p_e: float = P_EARN_PRIOR, p_d: float = P_DEPLOY) -> np.ndarray:
    _check_prob(p_e, "P_e")
    _check_prob(p_d, "P_d")
    return np.array([[1.0 - p_d, p_d], [p_e, 1.0 - p_e]])


def mom_activate_row(p_e: float = P_EARN_PRIOR) -> np.ndarray:
    _check_prob(p_e, "P_e")
    return np.array([[0.0, 1.0], [p_e, 1.0 - p_e]])


def tyre_matrix(persistence=TYRE_PERSISTENCE) -> np.ndarray:
    """Upper-bidiagonal monotone chain; the last stage must be absorbing."""
    p = np.asarray(persistence, dtype=float)
    if len(p) != N_TYRE:
        raise ValueError(f"need {N_TYRE} persistence values")
    out = np.diag(p)
    out[np.arange(N_TYRE - 1), np.arange(1, N_TYRE)] = 1.0 - p[:-1]
    out[-1, -1] = 1.0
    return out


def _check_prob(p, name):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {p}")


@dataclass(frozen=True, eq=False)
class ComposedTransition:
    matrix: np.ndarray
    p_burn: float

    def __post_init__(self):
        self.matrix.setflags(write=False)


def compose_factors(ers: np.ndarray, mom: np.ndarray, tyre: np.ndarray) -> np.ndarray:
    """40x40 matrix for the ``ers*10 + mom*5 + tyre`` index convention."""
    return np.kron(ers, np.kron(mom, tyre))


def compose(p_burn: float = DEFAULT_P_BURN, p_e: float = P_EARN_PRIOR, mom_mode: str = "idle",
            *, p_d: float = P_DEPLOY, tyre_persistence=TYRE_PERSISTENCE) -> ComposedTransition:
    if mom_mode == "idle":
        mom = mom_idle(p_e, p_d)
    elif mom_mode == "activate":
        mom = mom_activate_row(p_e)
    else:
        raise ValueError(f"unknown MOM mode {mom_mode!r}")
    return ComposedTransition(compose_factors(ers_rows(p_burn), mom, tyre_matrix(tyre_persistence)), p_burn)


@dataclass(frozen=True, eq=False)
class TransitionModel:
    """Inference-side transition parameters.

    ``ers`` is the action-marginalised 4x4 ERS factor. It starts as the
    ``p_burn`` mixture of the burn/harvest tables; calibration may replace it.
    The MOM factor is rebuilt per sector from the earn probability.
    """

    ers: np.ndarray
    tyre_persistence: tuple[float, ...] = TYRE_PERSISTENCE
    p_burn: float = DEFAULT_P_BURN
    p_d: float = P_DEPLOY
    p_e_prior: float = P_EARN_PRIOR

    @classmethod
    def default(cls, p_burn: float = DEFAULT_P_BURN, p_e_prior: float = P_EARN_PRIOR) -> "TransitionModel":
        return cls(ers=ers_rows(p_burn), p_burn=p_burn, p_e_prior=p_e_prior)

    def matrix(self, p_e: float | None = None) -> np.ndarray:
        p_e = self.p_e_prior if p_e is None else float(p_e)
        return _cached_matrix(np.ascontiguousarray(self.ers, dtype=float).tobytes(), tuple(self.tyre_persistence), self.p_d, p_e)

    def composed(self, p_e: float | None = None) -> ComposedTransition:
        return ComposedTransition(self.matrix(p_e).copy(), self.p_burn)

    def with_factors(self, ers=None, tyre_persistence=None) -> "TransitionModel":
        changes = {}
        if ers is not None:
            changes["ers"] = np.asarray(ers, dtype=float)
        if tyre_persistence is not None:
            changes["tyre_persistence"] = tuple(float(x) for x in tyre_persistence)
        return replace(self, **changes)


@lru_cache(maxsize=64)
def _cached_matrix(ers_bytes: bytes, tyre_persistence: tuple, p_d: float, p_e: float) -> np.ndarray:
    ers = np.frombuffer(ers_bytes).reshape(N_ERS, N_ERS)
    m = compose_factors(ers, mom_idle(p_e, p_d), tyre_matrix(tyre_persistence))
    m.setflags(write=False)
    return m

