"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Trend criteria run the default desk-scale configuration (K=40, P=8, T=60,
alpha=1, flip severe-uneven -> smooth) over seeds 0-3 and score the final
global model of each run.
"""
import math
from functools import lru_cache

import numpy as np
import pytest

from flarelab import flare as F
from flarelab import aggregators as agg
from flarelab.clustering import hdbscan
from flarelab.flare import Blacklist
from flarelab.harness import ExperimentConfig, build_setup, run_experiment
from flarelab.metrics import weighted_distance
from flarelab.nn import ModelParams, ModelShape, init_model, local_train, loss_and_grad
from oracles import (
    brute_krum_index,
    brute_median,
    brute_trimmed_mean,
    finite_difference_grad,
    reference_noise,
)

SEEDS = (0, 1, 2, 3)
RUNTIME_BUDGET = 300.0


@pytest.fixture
def report(capsys):
    def _report(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return _report


@lru_cache(maxsize=None)
def _run(aggregator, num_malicious, seed):
    return run_experiment(ExperimentConfig(aggregator=aggregator, num_malicious=num_malicious, seed=seed),
                          persist=False)


def _mean(aggregator, m, attr):
    return float(np.mean([getattr(_run(aggregator, m, s).final_metrics, attr) for s in SEEDS]))


# --- 1 ----------------------------------------------------------------------------
def test_c1_metric_fidelity(report):
    worked = [weighted_distance(0, k) for k in range(3)]
    ok_worked = all(abs(a - b) <= 1e-3 for a, b in zip(worked, (1.000, 1.359, 1.847)))
    err = max(abs(weighted_distance(i, j) - (math.e / 2) ** abs(i - j))
              for i in range(12) for j in range(12) if abs(i - j) <= 10)
    report("C1 metric fidelity", ok_worked and err <= 1e-12,
           f"d(0..2) = {[round(v, 4) for v in worked]}, max formula error {err:.1e}")


# --- 2 ----------------------------------------------------------------------------
def test_c2_aggregator_oracles(report):
    rng = np.random.default_rng(11)
    worst, exact_k0 = 0.0, True
    for _ in range(200):
        p = int(rng.integers(1, 7))
        d = int(rng.choice([4, 6, 8, 10]))  # output-only two-class models: d_w = 2 (input_dim + 1)
        vecs = rng.normal(scale=float(rng.uniform(0.1, 10)), size=(p, d))
        shape = ModelShape(d // 2 - 1, (), 2)
        bundle = agg.UpdateBundle.build(0, ModelParams.zeros(shape), [ModelParams(shape, v) for v in vecs])
        models = list(vecs)
        k = int(rng.integers(0, (p - 1) // 2 + 1))
        worst = max(worst, np.abs(agg.median(bundle).flat - brute_median(models)).max(),
                    np.abs(agg.trimmed_mean(bundle, k).flat - brute_trimmed_mean(models, k)).max())
        if p >= 3:
            f = int(rng.integers(0, p - 2))
            worst = max(worst, np.abs(agg.krum(bundle, f).flat - models[brute_krum_index(models, f)]).max())
        exact_k0 &= np.array_equal(agg.trimmed_mean(bundle, 0).flat, agg.fedavg(bundle).flat)
    report("C2 aggregator oracles", worst <= 1e-9 and exact_k0,
           f"200 instances, max deviation {worst:.1e}, trimmed_mean(k=0) == fedavg: {exact_k0}")


# --- 3 ----------------------------------------------------------------------------
def test_c3_gradient_check(report):
    rng = np.random.default_rng(12)
    worst = 0.0
    for case in range(50):
        hidden = tuple(int(h) for h in rng.integers(1, 7, size=int(rng.integers(0, 3))))
        shape = ModelShape(int(rng.integers(1, 6)), hidden, int(rng.integers(2, 5)),
                           activation="relu" if case % 2 else "tanh")
        p = init_model(shape, case)
        p = p.with_flat(p.flat + rng.normal(scale=0.3, size=p.flat.size))
        n = int(rng.integers(1, 9))
        xs, ys = rng.normal(size=(n, shape.input_dim)), rng.integers(0, shape.num_classes, n)
        _, g = loss_and_grad(p, xs, ys)
        num = finite_difference_grad(lambda f: loss_and_grad(ModelParams(shape, f), xs, ys)[0], p.flat.copy())
        worst = max(worst, np.linalg.norm(g - num) / max(np.linalg.norm(g) + np.linalg.norm(num), 1e-12))
    report("C3 gradient check", worst <= 1e-4, f"50 cases, max relative error {worst:.1e}")


# --- 4 ----------------------------------------------------------------------------
def test_c4_clustering_fidelity(report):
    rng = np.random.default_rng(13)
    agree = 0
    for _ in range(25):
        n, dim = int(rng.integers(4, 41)), int(rng.integers(1, 21))
        k = int(rng.integers(1, 4))
        pts = rng.normal(scale=8.0, size=(k, dim))[rng.integers(0, k, n)] + rng.normal(size=(n, dim))
        n_out = int(rng.integers(0, max(1, n // 5)))
        pts[:n_out] = rng.uniform(-30, 30, size=(n_out, dim))
        mcs = int(rng.integers(2, n // 2 + 2))
        agree += set(hdbscan(pts, mcs).noise_indices) == reference_noise(pts, mcs)
    report("C4 clustering fidelity", agree >= 23, f"NOISE sets agree on {agree}/25 instances")


# --- 5 ----------------------------------------------------------------------------
def test_c5_attack_effect(report):
    d_asr = _mean("fedavg", 12, "asr") - _mean("fedavg", 0, "asr")
    d_srec = _mean("fedavg", 0, "srec") - _mean("fedavg", 12, "srec")
    slowest = max(sum(_run(a, m, s).timings.values()) for a, m in (("fedavg", 0), ("fedavg", 12)) for s in SEEDS)
    ok = d_asr >= 0.25 and d_srec >= 0.15 and slowest <= RUNTIME_BUDGET
    report("C5 attack effectiveness", ok,
           f"ASR +{100 * d_asr:.1f} pts (need 25), SRec -{100 * d_srec:.1f} pts (need 15), "
           f"slowest run {slowest:.1f}s")


# --- 6 ----------------------------------------------------------------------------
def test_c6_defense_effect(report):
    asr_gap = _mean("fedavg", 12, "asr") - _mean("flare", 12, "asr")
    srec_gap = _mean("flare", 12, "srec") - _mean("fedavg", 12, "srec")
    report("C6 defense effectiveness", asr_gap >= 0.10 and srec_gap >= 0.08,
           f"ASR -{100 * asr_gap:.1f} pts vs attacked FedAvg (need 10), "
           f"SRec +{100 * srec_gap:.1f} pts (need 8)")


# --- 7 ----------------------------------------------------------------------------
def test_c7_source_target_identification(report):
    hits = total = 0
    for s in SEEDS:
        for rec in _run("flare", 12, s).records:
            if len(rec.malicious_selected) >= 2:
                total += 1
                hits += (rec.identified_sr, rec.identified_tr) == (2, 0)
    rate = hits / total if total else 0.0
    report("C7 source/target identification", total > 0 and rate >= 0.8,
           f"true pair in {hits}/{total} qualifying rounds ({100 * rate:.1f}%, need 80%)")


# --- 8 ----------------------------------------------------------------------------
def test_c8_blacklist_quality(report):
    rows = []
    for s in SEEDS:
        art = _run("flare", 12, s)
        bl = set(art.records[-1].blacklist)
        tp = len(bl & set(art.malicious_ids))
        rows.append((tp / len(bl) if bl else 1.0, len(bl) - tp))
    ok = all(p >= 0.8 and fp <= 2 for p, fp in rows)
    report("C8 blacklist quality", ok,
           "per seed (precision, benign listed) = " + ", ".join(f"({p:.2f}, {fp})" for p, fp in rows))


# --- 9 ----------------------------------------------------------------------------
def test_c9_no_attack_neutrality(report):
    gaps = [abs(_run("flare", 0, s).final_metrics.gacc - _run("fedavg", 0, s).final_metrics.gacc) for s in SEEDS]
    report("C9 no-attack neutrality", max(gaps) <= 0.03,
           f"|GAcc(FLARE) - GAcc(FedAvg)| per seed = {[round(100 * g, 2) for g in gaps]} pts (need <= 3)")


# --- 10 ---------------------------------------------------------------------------
def test_c10_poisoned_rate_monotonicity(report):
    asr = [_mean("fedavg", m, "asr") for m in (8, 12, 16)]
    steps = [float(x) for x in np.diff(asr)]
    report("C10 poisoned-rate monotonicity", all(x >= 0.05 for x in steps),
           f"FedAvg ASR at M=8/12/16 = {[round(100 * a, 1) for a in asr]} %, "
           f"steps {[round(100 * x, 1) for x in steps]} (need >= 5 each)")


# --- 11 ---------------------------------------------------------------------------
def _clustering_inputs(hidden_dims, monkeypatch):
    """Shapes handed to HDBSCAN during one real FLARE round of the default task."""
    seen = []
    real = F.hdbscan

    def spy(points, *a, **kw):
        seen.append(np.asarray(points).shape)
        return real(points, *a, **kw)

    monkeypatch.setattr(F, "hdbscan", spy)
    cfg = ExperimentConfig(aggregator="flare", hidden_dims=list(hidden_dims))
    setup = build_setup(cfg)
    g = init_model(setup.shape, 0)
    clients = [setup.clients[c] for c in setup.malicious_ids[:2]] + \
              [c for c in setup.clients if not c.malicious][:6]
    models = [local_train(g, c.data, cfg.train_config, [0, c.client_id]) for c in clients]
    bundle = agg.UpdateBundle.build(1, g, models, [len(c.data) for c in clients], [c.client_id for c in clients])
    F.flare_aggregate(bundle, Blacklist(3), cfg.ordering)
    monkeypatch.setattr(F, "hdbscan", real)
    return seen, g


def test_c11_feature_economy(report, monkeypatch):
    base, g1 = _clustering_inputs((16, 8), monkeypatch)
    wide, g2 = _clustering_inputs((32, 8), monkeypatch)
    d_e = g1.shape.neuron_dim
    per_client = {s[1] for s in base + wide}
    ok = base == wide == [(8, 2 * d_e)] and g1.shape.num_params != g2.shape.num_params
    report("C11 feature economy", ok,
           f"clustering input {base[0] if base else None} at d_w={g1.shape.num_params}, "
           f"{wide[0] if wide else None} at d_w={g2.shape.num_params}; values per client {sorted(per_client)}, "
           f"2*d_e = {2 * d_e}")
