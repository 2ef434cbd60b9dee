import random

import pytest
from hypothesis import given, strategies as st

from spamwall.config import AppConfig
from spamwall.pipeline import CSV_HEADER, STAGES, Stage
from spamwall.sim import (PROFILES, SimConfig, Simulation, parse_disabled_sessions, run_experiment,
                          sim_config_from_app, step)

SMALL = dict(n_users=20, n_groups=4, duration_minutes=30, server_capacity=20, queue_limit=40, queue_burst=40,
             session_minutes=10)


def test_no_execution_means_no_spread():
    report = run_experiment(SimConfig(p_exec=0, defenses=frozenset(), duration_minutes=60))
    assert len(report.infected) == 1
    assert all(r.infected == 1 for r in report.timeline)


def test_same_seed_same_report():
    a = run_experiment(SimConfig(**SMALL, seed=7, p_exec=0.5, defenses=frozenset()))
    b = run_experiment(SimConfig(**SMALL, seed=7, p_exec=0.5, defenses=frozenset()))
    assert a.csv_text() == b.csv_text() and a.timeline == b.timeline


def test_explicit_rng_is_used():
    cfg = SimConfig(**SMALL, p_exec=0.5, defenses=frozenset())
    assert run_experiment(cfg).timeline == Simulation(cfg, random.Random(cfg.seed)).run().timeline


def test_five_sessions_in_fifteen_hours():
    report = run_experiment(SimConfig(seed_infections=0, duration_minutes=900))
    assert len(report.sessions) == 5
    lines = report.csv_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER + ("dos_active",))
    assert len(lines) == 6


def test_queue_stays_within_burst():
    cfg = SimConfig(p_exec=1, defenses=frozenset(), duration_minutes=40)
    report = run_experiment(cfg)
    assert max(r.queue_after for r in report.timeline) <= cfg.queue_limit + cfg.queue_burst
    streak = 0
    for r in report.timeline:
        streak = streak + 1 if r.queue_after > cfg.queue_limit else 0
        assert r.dos_active == (streak >= 5)


def test_step_refuses_after_the_end():
    sim = Simulation(SimConfig(**{**SMALL, "duration_minutes": 1}))
    assert step(sim).minute == 0
    with pytest.raises(RuntimeError):
        step(sim)


def test_remap_stops_worm_delivery():
    cfg = dict(p_exec=0, defenses=frozenset(), duration_minutes=20)
    plain = run_experiment(SimConfig(**cfg))
    remapped = run_experiment(SimConfig(**cfg, remap_minute=5))
    assert all(r.worm_delivered > 0 for r in plain.timeline[5:])
    assert all(r.worm_delivered == 0 for r in remapped.timeline[5:])


def test_auto_mitigation_remaps_after_a_storm():
    report = run_experiment(SimConfig(p_exec=0, defenses=frozenset(), duration_minutes=20, auto_mitigate=True))
    assert report.alerts
    assert report.timeline[-1].worm_delivered == 0


def test_config_mapping():
    app = AppConfig.load(overrides={"sim.profile": "educated", "sim.disabled_sessions": "surbl:3-7;content:2",
                                    "sim.defenses": "none"})
    cfg = sim_config_from_app(app)
    assert cfg.p_exec == PROFILES["educated"] and cfg.defenses == frozenset() and cfg.remap_minute is None
    assert cfg.disabled_sessions == {Stage.SURBL: ((3, 7),), Stage.CONTENT: ((2, 2),)}
    with pytest.raises(ValueError):
        parse_disabled_sessions("nothing:1-2")


@pytest.mark.parametrize("kw", [dict(n_users=0), dict(server_capacity=0), dict(p_exec=1.5),
                                dict(background_filterable_fraction=-0.1)])
def test_invalid_configs(kw):
    with pytest.raises(ValueError):
        SimConfig(**kw)


# --- properties ---------------------------------------------------------------

_defenses = st.sets(st.sampled_from(STAGES)).map(frozenset)
_p = st.sampled_from([0.0, 0.2, 0.5, 1.0])


@given(_defenses, _p, st.integers(0, 10_000))
def test_conservation_and_infection_monotonicity(defenses, p_exec, seed):
    report = run_experiment(SimConfig(**SMALL, defenses=defenses, p_exec=p_exec, seed=seed))
    previous = 0
    for r in report.timeline:
        assert r.emitted == r.delivered + r.trapped + r.rejected + (r.queue_after - r.queue_before)
        assert r.infected >= previous
        previous = r.infected


@given(_defenses, st.sampled_from(STAGES), _p, st.integers(0, 10_000))
def test_more_defense_never_delivers_more_worm_mail(defenses, extra, p_exec, seed):
    fewer = run_experiment(SimConfig(**SMALL, defenses=defenses, p_exec=p_exec, seed=seed))
    more = run_experiment(SimConfig(**SMALL, defenses=defenses | {extra}, p_exec=p_exec, seed=seed))
    assert more.worm_messages_delivered <= fewer.worm_messages_delivered
