"""Baum-Welch calibration of the emission tables and transition factors.

The factored structure is kept through every M-step: the 4x4 ERS factor and
the tyre persistences are re-estimated from expected transition counts
projected onto their factors, the Override factor stays fixed. Emission
counts for Δt_sector, Δb_brake, σ²_speed and δ_throttle are pooled over both
table variants and over the two MOM values of each (ERS, tyre) cluster;
Δv_trap is estimated per variant and per state; z_aero only inside zones.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .belief import initial_belief
from .emission import VTRAP, ZAERO, FactoredEmissionTable
from .states import N_ERS, N_MOM, N_STATES, N_TYRE, OBS_RADICES, OBSERVABLES
from .transition import TransitionModel

log = logging.getLogger(__name__)


@dataclass
class TrainingSequence:
    """Discrete observations of one rival with its zone flags and earn probabilities."""

    bins: np.ndarray                 # (n, 6) int
    in_zone: np.ndarray              # (n,) bool
    p_e: np.ndarray | None = None    # (n,) per-transition earn probability; None -> prior

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=int)
        self.in_zone = np.asarray(self.in_zone, dtype=bool)
        if self.p_e is not None:
            self.p_e = np.asarray(self.p_e, dtype=float)
        if self.bins.ndim != 2 or self.bins.shape[1] != len(OBSERVABLES):
            raise ValueError("bins must have shape (n, 6)")
        if len(self.in_zone) != len(self.bins) or (self.p_e is not None and len(self.p_e) != len(self.bins)):
            raise ValueError("bins, in_zone and p_e must have equal length")


@dataclass
class CalibrationReport:
    log_likelihoods: list[float]
    table_deltas: dict[str, float]
    transition_deltas: dict[str, float]
    pseudo_count: float
    iterations: int
    converged: bool
    pseudo_backoffs: int = 0        # halvings of the pseudo-count needed to keep the likelihood up
    final_pseudo_count: float = 0.0

    def to_dict(self) -> dict:
        return {
            "log_likelihoods": [float(x) for x in self.log_likelihoods],
            "table_deltas": self.table_deltas,
            "transition_deltas": self.transition_deltas,
            "pseudo_count": self.pseudo_count,
            "iterations": self.iterations,
            "converged": self.converged,
            "pseudo_backoffs": self.pseudo_backoffs,
            "final_pseudo_count": self.final_pseudo_count,
        }


@dataclass
class CalibrationResult:
    tables: tuple[FactoredEmissionTable, FactoredEmissionTable]
    model: TransitionModel
    report: CalibrationReport


@dataclass
class _Stats:
    loglik: float = 0.0
    ers: np.ndarray = field(default_factory=lambda: np.zeros((N_ERS, N_ERS)))
    tyre: np.ndarray = field(default_factory=lambda: np.zeros((N_TYRE, N_TYRE)))
    # Emission counts per variant (0 normal, 1 zone) and observable: (40, n_bins).
    counts: list = field(default_factory=lambda: [[np.zeros((N_STATES, r)) for r in OBS_RADICES]
                                                  for _ in range(2)])


def _group(seqs: list[TrainingSequence]):
    """Stack sequences of equal length so the recursions run batched."""
    by_len: dict[int, list[TrainingSequence]] = {}
    for s in seqs:
        by_len.setdefault(len(s.bins), []).append(s)
    return by_len.values()


def _likelihoods(bins, zone, tables) -> np.ndarray:
    """(S, n, 40) emission likelihoods for stacked sequences."""
    S, n, _ = bins.shape
    out = np.ones((S, n, N_STATES))
    for v, table in enumerate(tables):
        sel = zone == bool(v)
        if not sel.any():
            continue
        b = bins[sel]
        lik = np.ones((len(b), N_STATES))
        for k in range(len(OBSERVABLES)):
            lik *= table.masses[k][:, b[:, k]].T
        out[sel] = lik
    return out


def _accumulate(seqs: list[TrainingSequence], tables, model: TransitionModel, b0: np.ndarray,
                stats: _Stats) -> None:
    bins = np.stack([s.bins for s in seqs])
    zone = np.stack([s.in_zone for s in seqs])
    p_e = np.stack([np.full(len(s.bins), model.p_e_prior) if s.p_e is None else s.p_e for s in seqs])
    S, n, _ = bins.shape
    lik = _likelihoods(bins, zone, tables)

    keys, key_idx = np.unique(p_e, return_inverse=True)
    key_idx = key_idx.reshape(S, n)
    mats = [model.matrix(float(k)) for k in keys]

    alpha = np.empty((S, n, N_STATES))
    scale = np.empty((S, n))
    a = b0[None, :] * lik[:, 0]
    for t in range(n):
        if t > 0:
            pred = np.empty_like(a)
            for j, T in enumerate(mats):
                sel = key_idx[:, t] == j
                if sel.any():
                    pred[sel] = alpha[sel, t - 1] @ T
            a = pred * lik[:, t]
        c = a.sum(axis=1)
        if np.any(c <= 0):
            raise FloatingPointError("observation sequence has zero likelihood under the current model")
        alpha[:, t] = a / c[:, None]
        scale[:, t] = c
    stats.loglik += float(np.log(scale).sum())

    beta = np.ones((S, N_STATES))
    xi = [np.zeros((N_STATES, N_STATES)) for _ in mats]
    gamma = np.empty((S, n, N_STATES))
    gamma[:, n - 1] = alpha[:, n - 1]
    for t in range(n - 1, 0, -1):
        w = lik[:, t] * beta / scale[:, t][:, None]
        nb = np.empty_like(beta)
        for j, T in enumerate(mats):
            sel = key_idx[:, t] == j
            if sel.any():
                xi[j] += alpha[sel, t - 1].T @ w[sel]
                nb[sel] = w[sel] @ T.T
        beta = nb
        gamma[:, t - 1] = alpha[:, t - 1] * beta

    joint = sum(x * T for x, T in zip(xi, mats))
    cube = joint.reshape(N_ERS, N_MOM, N_TYRE, N_ERS, N_MOM, N_TYRE)
    stats.ers += cube.sum(axis=(1, 2, 4, 5))
    stats.tyre += cube.sum(axis=(0, 1, 3, 4))

    g = gamma.reshape(-1, N_STATES)
    flat_bins = bins.reshape(-1, len(OBSERVABLES))
    flat_zone = zone.reshape(-1)
    for v in (0, 1):
        sel = flat_zone == bool(v)
        if not sel.any():
            continue
        gv = g[sel]
        for k, r in enumerate(OBS_RADICES):
            onehot = np.eye(r)[flat_bins[sel, k]]
            stats.counts[v][k] += gv.T @ onehot


def expected_statistics(seqs, tables, model: TransitionModel, b0=None) -> _Stats:
    """E-step over all sequences: log-likelihood plus expected counts."""
    b0 = initial_belief() if b0 is None else np.asarray(b0, dtype=float)
    stats = _Stats()
    for group in _group(list(seqs)):
        _accumulate(group, tables, model, b0, stats)
    return stats


def log_likelihood(seqs, tables, model: TransitionModel, b0=None) -> float:
    return expected_statistics(seqs, tables, model, b0).loglik


def _normalise(counts: np.ndarray, pseudo: float) -> np.ndarray:
    c = counts + pseudo
    tot = c.sum(axis=-1, keepdims=True)
    uniform = np.full_like(c, 1.0 / c.shape[-1])
    return np.where(tot > 0, c / np.where(tot > 0, tot, 1.0), uniform)


def _tie(counts: np.ndarray) -> np.ndarray:
    """Pool counts over the two MOM values of each (ERS, tyre) cluster."""
    cube = counts.reshape(N_ERS, N_MOM, N_TYRE, -1)
    pooled = cube.sum(axis=1, keepdims=True)
    return np.broadcast_to(pooled, cube.shape).reshape(counts.shape)


def m_step(stats: _Stats, tables, model: TransitionModel, pseudo_count: float = 1.0,
           update_transitions: bool = True):
    """New (tables, model) from expected counts."""
    normal, zone = tables
    new = [[None] * len(OBSERVABLES) for _ in range(2)]
    for k in range(len(OBSERVABLES)):
        if k == VTRAP:
            for v in (0, 1):
                new[v][k] = _normalise(stats.counts[v][k], pseudo_count)
        elif k == ZAERO:
            new[0][k] = np.array(normal.masses[k])
            new[1][k] = _normalise(_tie(stats.counts[1][k]), pseudo_count)
        else:
            shared = _normalise(_tie(stats.counts[0][k] + stats.counts[1][k]), pseudo_count)
            new[0][k] = shared
            new[1][k] = shared.copy()
    tables = (FactoredEmissionTable(tuple(new[0]), normal.variant, normal.circuit_name),
              FactoredEmissionTable(tuple(new[1]), zone.variant, zone.circuit_name))

    if update_transitions:
        ers = model.ers.copy()
        tot = stats.ers.sum(axis=1)
        ok = tot > 0
        ers[ok] = stats.ers[ok] / tot[ok, None]
        pers = list(model.tyre_persistence)
        for s in range(N_TYRE - 1):
            stay, move = stats.tyre[s, s], stats.tyre[s, s + 1]
            if stay + move > 0:
                pers[s] = stay / (stay + move)
        model = model.with_factors(ers=ers, tyre_persistence=pers)
    return tables, model


def calibrate(seqs, tables, model: TransitionModel, *, max_iters: int = 50, tol: float = 1e-4,
              pseudo_count: float = 1.0, update_transitions: bool = True, b0=None,
              max_backoffs: int = 30) -> CalibrationResult:
    """Run EM until the log-likelihood gain drops below ``tol`` or ``max_iters``.

    ``tol`` is measured in nats per observed sector, so one setting serves
    datasets of any size.

    With pseudo-counts the M-step maximises a penalised likelihood, which can
    lower the plain likelihood by a little. When it does, the pseudo-count is
    halved (and stays halved) until the step no longer lowers it; if even
    ``pseudo_count * 2**-max_backoffs`` does, the fit has stalled and EM stops.
    The recorded log-likelihood therefore never decreases and every
    re-estimated cell keeps a positive pseudo-count.
    """
    seqs = list(seqs)
    n_obs = max(sum(len(s.bins) for s in seqs), 1)
    start_tables, start_model = tables, model
    stats = expected_statistics(seqs, tables, model, b0)
    lls = [stats.loglik]
    converged = False
    backoffs = 0
    pseudo = pseudo_count
    min_pseudo = pseudo_count * 2.0 ** -max_backoffs
    it = 0
    for it in range(1, max_iters + 1):
        accepted = None
        while True:
            cand_tables, cand_model = m_step(stats, tables, model, pseudo, update_transitions)
            cand_stats = expected_statistics(seqs, cand_tables, cand_model, b0)
            if cand_stats.loglik >= lls[-1] or pseudo == 0:
                accepted = (cand_tables, cand_model, cand_stats)
                break
            if pseudo <= min_pseudo:
                break
            pseudo *= 0.5
            backoffs += 1
        if accepted is None:
            log.info("EM stalled: smoothing outweighs the likelihood gain; stopping at iteration %d", it)
            converged = True
            it -= 1
            break
        gain = accepted[2].loglik - lls[-1]
        tables, model, stats = accepted
        lls.append(stats.loglik)
        if abs(gain) / n_obs < tol:
            converged = True
            break
    report = CalibrationReport(
        log_likelihoods=lls,
        table_deltas={t.variant: max(float(np.max(np.abs(a - b))) for a, b in zip(t.masses, s.masses))
                      for t, s in zip(tables, start_tables)},
        transition_deltas={
            "ers": float(np.max(np.abs(model.ers - start_model.ers))),
            "tyre": float(np.max(np.abs(np.subtract(model.tyre_persistence, start_model.tyre_persistence)))),
        },
        pseudo_count=pseudo_count, iterations=it, converged=converged, pseudo_backoffs=backoffs,
        final_pseudo_count=pseudo,
    )
    return CalibrationResult(tables, model, report)


def sequences_from_traces(traces, use_gaps: bool = True) -> list[TrainingSequence]:
    """Training sequences from simulated races, with gap-derived earn probabilities."""
    from .belief import earn_probabilities

    out = []
    for race in traces:
        sil = race.sector_in_lap()
        for car in race.cars:
            p_e = (earn_probabilities(car.gap_ahead, sil, race.circuit.detection_sector,
                                      race.sim_config.earn_gap) if use_gaps else None)
            out.append(TrainingSequence(car.bins, car.in_zone, p_e))
    return out


def sample_hmm(tables, model: TransitionModel, zone_pattern, n_sequences: int,
               rng: np.random.Generator, b0=None) -> tuple[list[TrainingSequence], list[np.ndarray]]:
    """Draw sequences from the discrete HMM itself (earn probability at its prior).

    Returns the sequences and their true state paths.
    """
    zone_pattern = np.asarray(zone_pattern, dtype=bool)
    n = len(zone_pattern)
    b0 = initial_belief() if b0 is None else np.asarray(b0, dtype=float)
    T = model.matrix()
    cum_T = np.cumsum(T, axis=1)
    cum = [[np.cumsum(m, axis=1) for m in t.masses] for t in tables]
    seqs, paths = [], []
    for _ in range(n_sequences):
        states = np.empty(n, dtype=int)
        states[0] = rng.choice(N_STATES, p=b0)
        u = rng.random(n)
        for t in range(1, n):
            states[t] = min(int(np.searchsorted(cum_T[states[t - 1]], u[t], side="right")), N_STATES - 1)
        bins = np.empty((n, len(OBSERVABLES)), dtype=int)
        draws = rng.random((n, len(OBSERVABLES)))
        for t in range(n):
            c = cum[int(zone_pattern[t])]
            for k in range(len(OBSERVABLES)):
                row = c[k][states[t]]
                bins[t, k] = min(int(np.searchsorted(row, draws[t, k], side="right")), len(row) - 1)
        seqs.append(TrainingSequence(bins, zone_pattern.copy()))
        paths.append(states)
    return seqs, paths


def kl_divergence(p, q, eps: float = 1e-300) -> np.ndarray:
    """Row-wise KL(p || q)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p + eps) - np.log(q + eps)), 0.0)
    return terms.sum(axis=-1)
