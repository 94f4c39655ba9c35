"""Analytic emission model: parameters, bin integration, discretisation, tying.

Tables are stored factored (one bin-mass matrix per observable, shape
``(40, n_bins)``); joint probabilities are products across observables.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import ndtr, ndtri

from .circuit import CircuitConfig, MELBOURNE
from .states import (
    ERS_OF,
    MOM_OF,
    N_ERS,
    N_MOM,
    N_STATES,
    N_TYRE,
    OBSERVABLES,
    OBS_RADICES,
    TYRE_OF,
    DiscreteObservation,
    MomStatus,
)

# Per-ERS-mode values, ordered H, M, L_harvest, L_derate.
VTRAP_MU = (4.0, 1.0, -2.0, -1.5)
VTRAP_MU_H_SPENT = 3.5
VTRAP_SIGMA = 1.5
TSECTOR_MU_ERS = (-0.30, 0.00, 0.40, 0.30)
TSECTOR_TYRE_DELTA = (0.0, 0.1, 0.25, 0.50, 0.90)
TSECTOR_ERS_FACTOR = (0.6, 1.0, 1.3, 1.2)
TSECTOR_SIGMA_TYRE = (0.15, 0.15, 0.15, 0.20, 0.28)
BBRAKE_MU_ERS = (8.0, 0.0, -10.0, -5.0)
BBRAKE_MU_TYRE = (0.0, 3.0, 8.0, 15.0, 24.0)
BBRAKE_SIGMA_TYRE = (8.0, 8.0, 9.0, 10.0, 12.0)
SPEEDVAR_MU = (0.05, 0.10, 0.20, 0.22)
SPEEDVAR_SPENT_SHIFT = 0.02
SPEEDVAR_SIGMA = 0.02
ZAERO_P_ZONE = (0.85, 0.70, 0.80, 0.82)
DTHROTTLE_MU = (0.05, 0.15, 0.08, 0.55)
DTHROTTLE_SIGMA = (0.04, 0.08, 0.05, 0.18)

ACTIVE_VTRAP = (7.0, 1.0)
ACTIVE_TSECTOR = (-0.65, 0.10)
ACTIVE_SPEEDVAR = (0.03, 0.01)
ZONE_VTRAP_SHIFT = 4.0

VTRAP, TSECTOR, BBRAKE, SPEEDVAR, ZAERO, DTHROTTLE = range(6)
GAUSSIAN_OBS = (VTRAP, TSECTOR, BBRAKE, SPEEDVAR, DTHROTTLE)
# Observables whose spent-state row mixes in the MOM-active signature.
ACTIVE_MIXED_OBS = (VTRAP, TSECTOR, SPEEDVAR)

NONNEG = (0.0, math.inf)
UNIT = (0.0, 1.0)


@dataclass(frozen=True)
class GaussianSpec:
    mu: float
    sigma: float
    truncation: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def bin_masses(self, edges) -> np.ndarray:
        """Probability mass in each ``[edges[k], edges[k+1])`` interval."""
        edges = np.asarray(edges, dtype=float)
        if self.truncation is not None:
            lo, hi = self.truncation
            edges = np.clip(edges, lo, hi)
            z_lo, z_hi = (lo - self.mu) / self.sigma, (hi - self.mu) / self.sigma
            support = ndtr(z_hi) - ndtr(z_lo)
        else:
            support = 1.0
        cdf = ndtr((edges - self.mu) / self.sigma)
        masses = np.diff(cdf) / support
        masses = np.clip(masses, 0.0, None)
        return masses / masses.sum()

    def sample(self, rng: np.random.Generator, size=None):
        if self.truncation is None:
            return rng.normal(self.mu, self.sigma, size)
        return truncated_normal(rng, self.mu, self.sigma, *self.truncation, size=size)


def truncated_normal(rng, mu, sigma, lo, hi, size=None):
    """Inverse-CDF sampling from N(mu, sigma^2) restricted to [lo, hi]."""
    a, b = ndtr((lo - mu) / sigma), ndtr((hi - mu) / sigma)
    u = rng.uniform(a, b, size)
    x = mu + sigma * ndtri(u)
    return np.clip(x, lo, hi)


@dataclass(frozen=True)
class BinSpec:
    """Bin edges per observable, outermost edges included (may be infinite)."""

    vtrap: tuple[float, ...] = (-math.inf, -8, -4, -1, 1, 3, 5, 8, math.inf)
    tsector: tuple[float, ...] = (-math.inf, -0.6, -0.2, 0.2, 0.6, 1.0, 1.5, math.inf)
    bbrake: tuple[float, ...] = (-math.inf, -8, -3, 3, 10, math.inf)
    speedvar: tuple[float, ...] = (-math.inf, 0.06, 0.12, 0.18, 0.24, math.inf)
    zaero: tuple[float, ...] = (-math.inf, 0.5, math.inf)
    dthrottle: tuple[float, ...] = (0.0, 0.05, 0.15, 0.30, 0.50, 0.75, 1.0)

    def __post_init__(self):
        for name in OBSERVABLES:
            e = np.asarray(getattr(self, name), dtype=float)
            if np.any(np.diff(e) <= 0):
                raise ValueError(f"{name} bin edges must be strictly increasing")

    def edges(self, k: int) -> np.ndarray:
        return np.asarray(getattr(self, OBSERVABLES[k]), dtype=float)

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(len(getattr(self, name)) - 1 for name in OBSERVABLES)


DEFAULT_BINS = BinSpec()


@dataclass(frozen=True, eq=False)
class EmissionParams:
    """Per-state Gaussian/Bernoulli parameters, indexed by hidden-state index.

    Arrays hold the base (non-zone, non-active) parameters. The zone variant adds
    ``zone_shift`` to Δv_trap and uses ``zaero_p``; outside zones z_aero is 0.
    """

    circuit_name: str
    vtrap_mu: np.ndarray
    vtrap_sigma: np.ndarray
    tsector_mu: np.ndarray
    tsector_sigma: np.ndarray
    bbrake_mu: np.ndarray
    bbrake_sigma: np.ndarray
    speedvar_mu: np.ndarray
    speedvar_sigma: np.ndarray
    zaero_p: np.ndarray
    dthrottle_mu: np.ndarray
    dthrottle_sigma: np.ndarray
    active_vtrap: tuple[float, float] = ACTIVE_VTRAP
    active_tsector: tuple[float, float] = ACTIVE_TSECTOR
    active_speedvar: tuple[float, float] = ACTIVE_SPEEDVAR
    zone_shift: float = ZONE_VTRAP_SHIFT
    w_active: float = 0.2

    def gaussian(self, k: int, state: int, active: bool = False, zone: bool = False) -> GaussianSpec:
        """Distribution of Gaussian observable ``k`` for ``state``."""
        if active and k in ACTIVE_MIXED_OBS:
            mu, sigma = {VTRAP: self.active_vtrap, TSECTOR: self.active_tsector,
                         SPEEDVAR: self.active_speedvar}[k]
        else:
            name = OBSERVABLES[k]
            mu = float(getattr(self, f"{name}_mu")[state])
            sigma = float(getattr(self, f"{name}_sigma")[state])
        if k == VTRAP and zone:
            mu += self.zone_shift
        trunc = {SPEEDVAR: NONNEG, DTHROTTLE: UNIT}.get(k)
        return GaussianSpec(mu, sigma, trunc)

    def perturbed(self, mean_scale: float = 1.0, sigma_scale: float = 1.0) -> "EmissionParams":
        """Copy with every Gaussian mean and/or standard deviation scaled."""
        changes = {}
        for name in ("vtrap", "tsector", "bbrake", "speedvar", "dthrottle"):
            changes[f"{name}_mu"] = getattr(self, f"{name}_mu") * mean_scale
            changes[f"{name}_sigma"] = getattr(self, f"{name}_sigma") * sigma_scale
        for name in ("active_vtrap", "active_tsector", "active_speedvar"):
            mu, sigma = getattr(self, name)
            changes[name] = (mu * mean_scale, sigma * sigma_scale)
        return replace(self, **changes)


def build_emission_params(circuit: CircuitConfig = MELBOURNE, *, w_active: float = 0.2,
                          speedvar_sigma: float = SPEEDVAR_SIGMA) -> EmissionParams:
    e, m, t = ERS_OF, MOM_OF, TYRE_OF
    spent = m == MomStatus.SPENT

    vtrap_mu = np.asarray(VTRAP_MU)[e]
    vtrap_mu = np.where((e == 0) & spent, VTRAP_MU_H_SPENT, vtrap_mu)
    tsector_mu = np.asarray(TSECTOR_MU_ERS)[e] + np.asarray(TSECTOR_TYRE_DELTA)[t] * np.asarray(TSECTOR_ERS_FACTOR)[e]
    dthrottle_mu = np.asarray(DTHROTTLE_MU, dtype=float).copy()
    dthrottle_mu[3] += circuit.l_derate_throttle_offset

    return EmissionParams(
        circuit_name=circuit.name,
        vtrap_mu=vtrap_mu.astype(float),
        vtrap_sigma=np.full(N_STATES, VTRAP_SIGMA),
        tsector_mu=tsector_mu,
        tsector_sigma=np.asarray(TSECTOR_SIGMA_TYRE)[t],
        bbrake_mu=np.asarray(BBRAKE_MU_ERS)[e] + np.asarray(BBRAKE_MU_TYRE)[t],
        bbrake_sigma=np.asarray(BBRAKE_SIGMA_TYRE)[t],
        speedvar_mu=np.asarray(SPEEDVAR_MU)[e] + SPEEDVAR_SPENT_SHIFT * spent,
        speedvar_sigma=np.full(N_STATES, float(speedvar_sigma)),
        zaero_p=np.asarray(ZAERO_P_ZONE)[e],
        dthrottle_mu=dthrottle_mu[e],
        dthrottle_sigma=np.asarray(DTHROTTLE_SIGMA)[e],
        w_active=w_active,
    )


@dataclass(frozen=True, eq=False)
class FactoredEmissionTable:
    """Bin-mass matrices, one ``(40, n_bins)`` array per observable."""

    masses: tuple[np.ndarray, ...]
    variant: str = "normal"
    circuit_name: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.masses) != len(OBSERVABLES):
            raise ValueError("expected one mass matrix per observable")
        for k, arr in enumerate(self.masses):
            if arr.shape != (N_STATES, OBS_RADICES[k]):
                raise ValueError(f"{OBSERVABLES[k]} masses have shape {arr.shape}")
            arr.setflags(write=False)

    def likelihood(self, o) -> np.ndarray:
        """P(o | state) for all 40 states."""
        out = np.ones(N_STATES)
        for k, b in enumerate(o):
            out = out * self.masses[k][:, int(b)]
        return out

    def likelihoods(self, obs: np.ndarray) -> np.ndarray:
        """Vectorised likelihood for an ``(n, 6)`` integer observation array -> ``(n, 40)``."""
        obs = np.asarray(obs, dtype=int)
        out = np.ones((len(obs), N_STATES))
        for k in range(len(OBSERVABLES)):
            out *= self.masses[k][:, obs[:, k]].T
        return out

    def row_sum_error(self) -> float:
        return max(float(np.max(np.abs(m.sum(axis=1) - 1.0))) for m in self.masses)

    def checksum(self) -> str:
        return hashlib.sha256("\n".join(_record_lines(self)).encode()).hexdigest()


def _mixture_masses(params: EmissionParams, k: int, state: int, edges, zone: bool) -> np.ndarray:
    base = params.gaussian(k, state, zone=zone).bin_masses(edges)
    if k in ACTIVE_MIXED_OBS and MOM_OF[state] == MomStatus.SPENT and params.w_active > 0:
        act = params.gaussian(k, state, active=True, zone=zone).bin_masses(edges)
        return (1.0 - params.w_active) * base + params.w_active * act
    return base


def build_tables(params: EmissionParams, bins: BinSpec = DEFAULT_BINS
                 ) -> tuple[FactoredEmissionTable, FactoredEmissionTable]:
    """Integrate every observable distribution over its bins, normal and zone variants."""
    tables = []
    for zone in (False, True):
        masses = []
        for k in range(len(OBSERVABLES)):
            if k == ZAERO:
                p1 = params.zaero_p if zone else np.zeros(N_STATES)
                arr = np.column_stack([1.0 - p1, p1])
            else:
                edges = bins.edges(k)
                arr = np.vstack([_mixture_masses(params, k, s, edges, zone) for s in range(N_STATES)])
            masses.append(arr.astype(float))
        tables.append(FactoredEmissionTable(tuple(masses), "zone" if zone else "normal",
                                            params.circuit_name))
    return tables[0], tables[1]


def discretize(raw, bins: BinSpec = DEFAULT_BINS) -> DiscreteObservation:
    """Map a continuous six-tuple onto bin indices; boundary values go to the upper bin."""
    raw = tuple(float(x) for x in raw)
    if len(raw) != len(OBSERVABLES):
        raise ValueError(f"expected {len(OBSERVABLES)} components, got {len(raw)}")
    for name, x in zip(OBSERVABLES, raw):
        if not math.isfinite(x):
            raise ValueError(f"non-finite {name}: {x}")
    if raw[ZAERO] not in (0.0, 1.0):
        raise ValueError(f"zaero must be 0 or 1, got {raw[ZAERO]}")
    if not 0.0 <= raw[DTHROTTLE] <= 1.0:
        raise ValueError(f"dthrottle must lie in [0, 1], got {raw[DTHROTTLE]}")
    out = []
    for k, x in enumerate(raw):
        inner = bins.edges(k)[1:-1]
        out.append(int(np.searchsorted(inner, x, side="right")))
    return DiscreteObservation(*out)


def discretize_array(raw: np.ndarray, bins: BinSpec = DEFAULT_BINS) -> np.ndarray:
    """Vectorised :func:`discretize` for an ``(n, 6)`` float array (no validation)."""
    raw = np.asarray(raw, dtype=float)
    cols = [np.searchsorted(bins.edges(k)[1:-1], raw[:, k], side="right") for k in range(len(OBSERVABLES))]
    return np.column_stack(cols).astype(int)


def emission_prob(table: FactoredEmissionTable, state: int, o) -> float:
    p = 1.0
    for k, b in enumerate(o):
        p *= float(table.masses[k][state, int(b)])
    return p


def apply_tying(table: FactoredEmissionTable, weights: np.ndarray | None = None) -> FactoredEmissionTable:
    """Average each (ERS, tyre) cluster's bin vectors across the two MOM values.

    Δv_trap keeps its MOM dependence. ``weights`` (per state) turns the plain
    average into an occupancy-weighted one, which is what a pooled-count
    M-step produces.
    """
    w = np.ones(N_STATES) if weights is None else np.asarray(weights, dtype=float)
    masses = []
    for k, arr in enumerate(table.masses):
        arr = np.array(arr)
        if k != VTRAP:
            for ers in range(N_ERS):
                for tyre in range(N_TYRE):
                    idx = [ers * N_MOM * N_TYRE + m * N_TYRE + tyre for m in range(N_MOM)]
                    ww = w[idx]
                    ww = np.full(len(idx), 1.0 / len(idx)) if ww.sum() <= 0 else ww / ww.sum()
                    arr[idx] = ww @ arr[idx]
        masses.append(arr)
    return FactoredEmissionTable(tuple(masses), table.variant, table.circuit_name)


# --- serialisation -------------------------------------------------------

TABLE_FORMAT = "rivalhmm-emission-table"
TABLE_VERSION = 1


def _record_lines(table: FactoredEmissionTable) -> list[str]:
    lines = []
    for s in range(N_STATES):
        for k, arr in enumerate(table.masses):
            vals = " ".join(repr(float(v)) for v in arr[s])
            lines.append(f"{s} {k} {vals}")
    return lines


def write_table(path, table: FactoredEmissionTable) -> str:
    """Write one table variant; returns its checksum."""
    records = _record_lines(table)
    checksum = table.checksum()
    header = [
        f"# {TABLE_FORMAT} v{TABLE_VERSION}",
        f"# circuit={table.circuit_name}",
        f"# variant={table.variant}",
        f"# checksum={checksum}",
    ]
    Path(path).write_text("\n".join(header + records) + "\n")
    return checksum


def read_table(path) -> FactoredEmissionTable:
    header, masses = {}, [np.zeros((N_STATES, r)) for r in OBS_RADICES]
    seen = set()
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith(TABLE_FORMAT):
                version = int(body.split()[-1].lstrip("v"))
                if version != TABLE_VERSION:
                    raise ValueError(f"unsupported table version {version}")
            elif "=" in body:
                key, value = body.split("=", 1)
                header[key] = value
            continue
        parts = line.split()
        s, k = int(parts[0]), int(parts[1])
        vals = np.array([float(v) for v in parts[2:]])
        if len(vals) != OBS_RADICES[k]:
            raise ValueError(f"record ({s}, {k}) has {len(vals)} bins")
        masses[k][s] = vals
        seen.add((s, k))
    if len(seen) != N_STATES * len(OBSERVABLES):
        raise ValueError(f"{path}: incomplete table ({len(seen)} records)")
    return FactoredEmissionTable(tuple(masses), header.get("variant", "normal"),
                                 header.get("circuit", ""), meta={"checksum": header.get("checksum")})
