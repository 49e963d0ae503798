import csv
import json
from collections import Counter

import numpy as np
import pytest

from flarelab.aggregators import UpdateBundle
from flarelab.flare import Blacklist
from flarelab.harness import (
    OUTPUT_ENV,
    ROUND_COLUMNS,
    ConfigError,
    ExperimentConfig,
    FederationState,
    RoundRecord,
    _aggregate,
    build_setup,
    run_experiment,
    run_round,
    select_clients,
)
from flarelab.nn import init_model, local_train

SMALL = dict(num_clients=10, participants=4, rounds=3, num_malicious=3, samples_per_class=300,
             test_samples_per_class=100, hidden_dims=[8])


def small(**kw):
    return ExperimentConfig(**{**SMALL, **kw})


# --- selection ------------------------------------------------------------------
def test_select_whole_pool_and_capped():
    assert select_clients(range(40), set(), 40, 0, 1) == list(range(40))
    bl = set(range(40)) - {3, 17, 29}
    assert select_clients(range(40), bl, 8, 0, 1) == [3, 17, 29]
    with pytest.raises(RuntimeError, match="all clients blacklisted"):
        select_clients(range(4), {0, 1, 2, 3}, 2, 0, 1)


def test_selection_is_uniform_and_deterministic():
    counts = Counter()
    for t in range(1000):
        counts.update(select_clients(range(40), set(), 8, 5, t))
    assert all(160 <= counts[c] <= 240 for c in range(40))
    assert select_clients(range(40), set(), 8, 5, 7) == select_clients(range(40), set(), 8, 5, 7)
    assert select_clients(range(40), set(), 8, 5, 7) != select_clients(range(40), set(), 8, 5, 8)


# --- config ------------------------------------------------------------------------
def test_defaults_follow_the_training_table():
    c = ExperimentConfig()
    assert (c.num_clients, c.participants, c.rounds, c.num_malicious, c.alpha) == (40, 8, 60, 12, 1.0)
    t = c.train_config
    assert (t.learning_rate, t.momentum, t.batch_size, t.local_epochs) == (0.03, 0.5, 64, 3)
    assert (c.flip.source, c.flip.target) == (2, 0)


@pytest.mark.parametrize(
    "kw,match",
    [
        (dict(num_malicious=20), "M < K/2"),
        (dict(participants=50), "participants"),
        (dict(aggregator="bulyan"), "unknown aggregator"),
        (dict(flip_source="ice"), "flip"),
        (dict(flip_source="smooth", flip_target="severe-uneven"), "flip"),
        (dict(dataset="/nonexistent.csv"), "does not exist"),
        (dict(hidden_dims=[0]), "dimensions"),
    ],
)
def test_validation_errors(kw, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig(**kw).validate()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config keys"):
        ExperimentConfig.from_dict({"nmalicious": 3})


def test_config_round_trip():
    c = small(aggregator="krum", krum_f=1)
    assert ExperimentConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


# --- rounds -----------------------------------------------------------------------
def test_one_fedavg_round_improves_accuracy():
    improved = 0
    for seed in range(10):
        cfg = small(seed=seed, num_malicious=0, rounds=1)
        art = run_experiment(cfg, persist=False)
        improved += art.records[0].metrics.gacc > art.initial_metrics.gacc
    assert improved >= 9


def test_single_participant_round_is_that_clients_model():
    cfg = small(participants=1, num_malicious=0)
    setup = build_setup(cfg)
    g = init_model(setup.shape, [cfg.seed, 707])
    state = FederationState(g, list(setup.clients), Blacklist(3))
    state, rec = run_round(state, cfg, 1, setup.test)
    (cid,) = rec.selected
    expected = local_train(g, setup.clients[cid].data, cfg.train_config, [cfg.seed, 1, cid, 606])
    assert np.array_equal(state.global_model.flat, expected.flat)


def test_flare_round_record_names_crafted_outliers():
    cfg = small(aggregator="flare")
    setup = build_setup(cfg)
    g = init_model(setup.shape, 0)
    rng = np.random.default_rng(0)
    models = []
    for cid in range(8):
        m = g.copy()
        w, b = m.layers()[-1]
        w += rng.normal(scale=0.01, size=w.shape)
        if cid in (2, 5):
            w[2] -= 1.0
            w[0] += 1.0
        models.append(m)
    bundle = UpdateBundle.build(1, g, models, [50] * 8, list(range(8)))
    state = FederationState(g, list(setup.clients), Blacklist(3))
    rec = RoundRecord(1, list(range(8)), [50] * 8, [])
    _aggregate(cfg, state, bundle, rec)
    assert rec.outliers == [2, 5]
    assert (rec.identified_sr, rec.identified_tr) == (2, 0)


def test_aggregation_failure_keeps_previous_model():
    cfg = small(aggregator="krum", krum_f=3)  # P=4 < f+3
    art = run_experiment(cfg.replace(rounds=1), persist=False)
    rec = art.records[0]
    assert any("aggregation failed" in f for f in rec.flags)
    assert art.final_model.flat.tolist() == init_model(build_setup(cfg).shape, [cfg.seed, 707]).flat.tolist()


@pytest.mark.parametrize("name", ["fedavg", "krum", "tmean", "median", "foolsgold", "flame", "flare"])
def test_every_aggregator_runs(name):
    art = run_experiment(small(aggregator=name, rounds=2), persist=False)
    assert len(art.records) == 2
    assert all(np.isfinite(art.final_model.flat))


def test_zero_rounds():
    art = run_experiment(small(rounds=0), persist=False)
    assert art.records == []
    assert art.final_metrics is art.initial_metrics


def test_blacklist_invariants_over_a_run():
    cfg = small(aggregator="flare", rounds=12, blacklist_threshold=0)
    art = run_experiment(cfg, persist=False)
    prev = set()
    for rec in art.records:
        assert set(rec.selected).isdisjoint(prev)
        assert len(rec.selected) == min(cfg.participants, cfg.num_clients - len(prev))
        assert prev <= set(rec.blacklist)
        prev = set(rec.blacklist)


def test_records_independent_of_worker_count():
    a = run_experiment(small(aggregator="flare", workers=1), persist=False)
    b = run_experiment(small(aggregator="flare", workers=3), persist=False)
    assert [r.csv_row() for r in a.records] == [r.csv_row() for r in b.records]


def test_eval_every_skips_rounds_but_always_scores_the_last():
    art = run_experiment(small(rounds=5, eval_every=2), persist=False)
    assert [r.metrics is not None for r in art.records] == [False, True, False, True, True]


# --- persistence -------------------------------------------------------------------
def test_artifacts_are_byte_identical(tmp_path):
    run_experiment(small(aggregator="flare", output_dir=str(tmp_path / "a")))
    run_experiment(small(aggregator="flare", output_dir=str(tmp_path / "b")))
    a, b = (tmp_path / "a" / "rounds.csv").read_bytes(), (tmp_path / "b" / "rounds.csv").read_bytes()
    assert a == b
    header = a.decode().splitlines()[0].split(",")
    assert header == ROUND_COLUMNS
    meta = json.loads((tmp_path / "a" / "run.json").read_text())
    assert meta["config"]["aggregator"] == "flare" and len(meta["rounds"]) == 3


def test_env_var_overrides_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    run_experiment(small(output_dir=str(tmp_path / "cfg")))
    assert (tmp_path / "env" / "rounds.csv").exists()
    assert not (tmp_path / "cfg").exists()


def test_csv_dataset_end_to_end(tmp_path):
    rng = np.random.default_rng(0)
    f = tmp_path / "train.csv"
    with f.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "label"])
        for i in range(400):
            c = i % 3
            w.writerow([c * 4 + rng.normal(), rng.normal(), ["smooth", "slight-uneven", "severe-uneven"][c]])
    art = run_experiment(small(dataset=str(f), rounds=2), persist=False)
    assert art.final_model.shape.input_dim == 2
    assert art.final_metrics.confusion.sum() == 80
