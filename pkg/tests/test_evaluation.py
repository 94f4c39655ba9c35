import json

import numpy as np
import pytest

from rivalhmm.emission import build_emission_params, build_tables
from rivalhmm.env import BURN, HARVEST, DuelEnv
from rivalhmm.evaluation import (
    evaluate_inference,
    evaluate_policies,
    perturbation_grid,
    score_beliefs,
    threshold_sweep,
    vtrap_residual,
    write_json,
    write_policy_table,
    write_table3,
)
from rivalhmm.policy import oracle_belief
from rivalhmm.sim import generate_dataset
from rivalhmm.states import N_STATES
from rivalhmm.transition import TransitionModel


@pytest.fixture(scope="module")
def small():
    races = generate_dataset(n_races=4)
    params = build_emission_params()
    return races, params, build_tables(params), TransitionModel.default()


def _stack(races):
    cars = [c for r in races for c in r.cars]
    cat = lambda k: np.concatenate([getattr(c, k) for c in cars])
    return cat("state"), cat("z_aero"), cat("in_zone"), cat("trap_active")


def test_oracle_beliefs_score_perfectly(small):
    races = small[0]
    states, z, zone, trap = _stack(races)
    b = np.stack([oracle_belief(s) for s in states])
    m = score_beliefs(b, states, z, zone, trap)
    assert m.top1 == m.ers == m.harvest_derate == m.mom == m.tyre_cliff == 1.0
    assert m.ece == 0.0
    # True states put the trap setter in L_harvest with z_aero = 1 on every trap sector.
    assert m.trap_recall == 1.0


def test_uniform_beliefs_score_at_chance(small):
    states, z, zone, trap = _stack(small[0])
    b = np.full((len(states), N_STATES), 1 / N_STATES)
    m = score_beliefs(b, states, z, zone, trap)
    assert m.trap_recall == 0.0 and m.trap_fpr == 0.0
    # Ties go to the first class, so marginal accuracy is the share of that class.
    assert m.ece == pytest.approx(abs(0.25 - m.ers))


def test_inference_metrics_in_range(small):
    races, _, tables, model = small
    m = evaluate_inference(races, tables, model)
    d = m.to_dict()
    for k in ("top1", "ers", "harvest_derate", "mom", "tyre_cliff", "trap_recall", "trap_fpr", "ece"):
        assert 0.0 <= d[k] <= 1.0
    assert m.n_sectors == 4 * 6 * 174
    assert m.ers > 0.85


def test_infinite_threshold_flags_nothing(small):
    races, params, tables, model = small
    pts = threshold_sweep(races, tables, model, params, thresholds=(-np.inf, np.inf))
    assert pts[1].recall == 0.0 and pts[1].fpr == 0.0
    assert pts[0].recall >= pts[1].recall


def test_residual_uses_true_state_mean(small):
    races, params, _, _ = small
    car = races[0].cars[0]
    r = vtrap_residual(car, params)
    i = int(np.flatnonzero(~car.mom_activated)[0])
    assert r[i] == pytest.approx(car.raw[i, 0] - params.vtrap_mu[car.state[i]])


def test_perturbation_grid():
    labels = [g[0] for g in perturbation_grid()]
    assert labels == ["mean -20%", "mean -10%", "baseline", "mean +10%", "mean +20%",
                      "noise +10%", "noise +20%", "noise +30%"]


def test_policy_evaluation_is_paired_and_counts(tmp_path):
    env = DuelEnv()
    res = evaluate_policies(env, {"burn": lambda o: BURN, "harvest": lambda o: HARVEST}, seeds=range(4))
    b, h = res["burn"], res["harvest"]
    assert b.burn_fraction == 1.0 and h.burn_fraction == 0.0
    assert b.trap_sector_burn_rate in (1.0,) or np.isnan(b.trap_sector_burn_rate)
    assert h.failed_attacks == 0
    assert len(b.returns) == 4
    assert b.armed_sectors >= b.trap_sectors
    write_policy_table(tmp_path / "p.csv", res)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0].startswith("policy,mean_return") and len(lines) == 3


def test_writers(tmp_path, small):
    races, _, tables, model = small
    m = evaluate_inference(races[:1], tables, model)
    write_table3(tmp_path / "t3.csv", m)
    assert "ERS-level accuracy" in (tmp_path / "t3.csv").read_text()
    write_json(tmp_path / "m.json", m.to_dict())
    assert json.loads((tmp_path / "m.json").read_text())["ers"] == m.ers
