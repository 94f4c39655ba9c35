"""Enumeration of the 40 hidden rival states and the discrete observation space.

State index convention: ``ers * 10 + mom * 5 + tyre`` so that ERS mode is the
outermost stratum and each ERS marginal is a contiguous block of ten indices.
"""
from __future__ import annotations

from enum import IntEnum
from typing import NamedTuple

import numpy as np


class ErsMode(IntEnum):
    H = 0
    M = 1
    L_HARVEST = 2
    L_DERATE = 3


class MomStatus(IntEnum):
    AVAILABLE = 0
    SPENT = 1


class TyreStage(IntEnum):
    NEW = 0
    LIGHT = 1
    MODERATE = 2
    HEAVY = 3
    CLIFF = 4


N_ERS = len(ErsMode)
N_MOM = len(MomStatus)
N_TYRE = len(TyreStage)
N_STATES = N_ERS * N_MOM * N_TYRE

OBSERVABLES = ("vtrap", "tsector", "bbrake", "speedvar", "zaero", "dthrottle")
OBS_RADICES = (8, 7, 5, 5, 2, 6)
N_JOINT_OBS = int(np.prod(OBS_RADICES))


class HiddenState(NamedTuple):
    ers: ErsMode
    mom: MomStatus
    tyre: TyreStage


class DiscreteObservation(NamedTuple):
    vtrap_bin: int
    tsector_bin: int
    bbrake_bin: int
    speedvar_bin: int
    zaero_bin: int
    dthrottle_bin: int


def state_index(s: HiddenState) -> int:
    return int(s.ers) * N_MOM * N_TYRE + int(s.mom) * N_TYRE + int(s.tyre)


def state_decode(index: int) -> HiddenState:
    if not 0 <= index < N_STATES:
        raise IndexError(f"state index {index} outside [0, {N_STATES - 1}]")
    ers, rest = divmod(int(index), N_MOM * N_TYRE)
    mom, tyre = divmod(rest, N_TYRE)
    return HiddenState(ErsMode(ers), MomStatus(mom), TyreStage(tyre))


def joint_obs_index(o) -> int:
    """Mixed-radix encoding of a six-bin observation, first field most significant."""
    idx = 0
    for name, value, radix in zip(OBSERVABLES, o, OBS_RADICES):
        value = int(value)
        if not 0 <= value < radix:
            raise IndexError(f"{name} bin {value} outside [0, {radix - 1}]")
        idx = idx * radix + value
    return idx


def joint_obs_decode(index: int) -> DiscreteObservation:
    if not 0 <= index < N_JOINT_OBS:
        raise IndexError(f"observation index {index} outside [0, {N_JOINT_OBS - 1}]")
    digits = []
    for radix in reversed(OBS_RADICES):
        index, d = divmod(int(index), radix)
        digits.append(d)
    return DiscreteObservation(*reversed(digits))


# Component lookup arrays, indexed by state index.
ERS_OF = np.repeat(np.arange(N_ERS), N_MOM * N_TYRE)
MOM_OF = np.tile(np.repeat(np.arange(N_MOM), N_TYRE), N_ERS)
TYRE_OF = np.tile(np.arange(N_TYRE), N_ERS * N_MOM)


def ers_marginal_groups() -> dict[ErsMode, list[int]]:
    return {e: [i for i in range(N_STATES) if ERS_OF[i] == e] for e in ErsMode}


def mom_marginal_groups() -> dict[MomStatus, list[int]]:
    return {m: [i for i in range(N_STATES) if MOM_OF[i] == m] for m in MomStatus}


def tyre_marginal_groups() -> dict[TyreStage, list[int]]:
    return {t: [i for i in range(N_STATES) if TYRE_OF[i] == t] for t in TyreStage}


def all_states() -> list[HiddenState]:
    return [state_decode(i) for i in range(N_STATES)]
