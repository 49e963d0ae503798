"""Federated training loop, experiment configuration and result persistence."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import aggregators as agg
from .adversary import AdversaryRoster, ClientState, FlipSpec, apply_roster
from .data import (
    PRESETS,
    Dataset,
    HazardOrdering,
    PartitionSpec,
    dirichlet_partition,
    generate_synthetic,
    load_csv,
)
from .flare import Blacklist, flare_aggregate
from .metrics import MetricsReport, confusion_matrix, standard_metrics
from .nn import ModelParams, ModelShape, TrainConfig, init_model, local_train, predict_batch

log = logging.getLogger(__name__)

OUTPUT_ENV = "FLARELAB_OUTPUT_DIR"
ROUND_COLUMNS = [
    "round", "gacc", "srec", "asr", "weighted_error",
    "n_outliers", "identified_sr", "identified_tr", "bl_size",
]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    num_clients: int = 40
    participants: int = 8
    rounds: int = 60
    seed: int = 0
    # model
    hidden_dims: list[int] = field(default_factory=lambda: [16])
    activation: str = "relu"
    # local training
    learning_rate: float = 0.03
    momentum: float = 0.5
    batch_size: int = 64
    local_epochs: int = 3
    # data
    dataset: str = "synthetic"
    class_names: list[str] = field(default_factory=lambda: list(PRESETS["unevenness"].class_names))
    label_column: str = "label"
    test_path: str | None = None
    test_fraction: float = 0.2
    samples_per_class: int = 8000
    test_samples_per_class: int = 1000
    input_dim: int = 10
    class_separation: float = 4.0
    alpha: float = 1.0
    # adversary
    num_malicious: int = 12
    flip_source: str = "severe-uneven"
    flip_target: str = "smooth"
    # aggregation
    aggregator: str = "fedavg"
    krum_f: int | None = None
    trim_k: int | None = None
    flame_noise: float = 0.0
    blacklist_threshold: int = 3
    # bookkeeping
    eval_every: int = 1
    workers: int = 1
    output_dir: str | None = None

    @property
    def ordering(self) -> HazardOrdering:
        return HazardOrdering(tuple(self.class_names))

    @property
    def flip(self) -> FlipSpec:
        return FlipSpec.from_names(self.flip_source, self.flip_target, self.ordering)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.momentum, self.batch_size, self.local_epochs)

    def validate(self) -> "ExperimentConfig":
        problems = []
        if self.num_clients < 1:
            problems.append("num_clients must be >= 1")
        if not 1 <= self.participants <= self.num_clients:
            problems.append(f"participants must be in [1, num_clients={self.num_clients}]")
        if self.rounds < 0:
            problems.append("rounds must be >= 0")
        if self.num_malicious < 0 or (self.num_malicious > 0 and 2 * self.num_malicious >= self.num_clients):
            problems.append(f"num_malicious={self.num_malicious} violates M < K/2 for K={self.num_clients}")
        if self.aggregator not in agg.AGGREGATORS:
            problems.append(f"unknown aggregator {self.aggregator!r}; choose from {', '.join(agg.AGGREGATORS)}")
        if self.eval_every < 1:
            problems.append("eval_every must be >= 1")
        if self.blacklist_threshold < 0:
            problems.append("blacklist_threshold must be >= 0")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        if self.dataset != "synthetic" and not Path(self.dataset).exists():
            problems.append(f"dataset file {self.dataset!r} does not exist")
        try:
            self.flip
        except (KeyError, ValueError) as exc:
            problems.append(f"flip: {exc}")
        try:
            self.train_config
            ModelShape(max(self.input_dim, 1), tuple(self.hidden_dims), max(len(self.class_names), 2), self.activation)
        except ValueError as exc:
            problems.append(str(exc))
        if len(self.class_names) < 2:
            problems.append("need at least two classes")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class RoundRecord:
    round: int
    selected: list[int]
    sizes: list[int]
    malicious_selected: list[int]
    identified_sr: int | None = None
    identified_tr: int | None = None
    ambiguous: bool = False
    outliers: list[int] = field(default_factory=list)
    blacklist: list[int] = field(default_factory=list)
    metrics: MetricsReport | None = None
    flags: list[str] = field(default_factory=list)

    def csv_row(self) -> dict:
        m = self.metrics.as_row() if self.metrics else {}
        return {
            "round": self.round,
            "gacc": m.get("gacc"),
            "srec": m.get("srec"),
            "asr": m.get("asr"),
            "weighted_error": m.get("weighted_error"),
            "n_outliers": len(self.outliers),
            "identified_sr": self.identified_sr,
            "identified_tr": self.identified_tr,
            "bl_size": len(self.blacklist),
        }

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["metrics"] = self.metrics.to_json() if self.metrics else None
        return d


@dataclass
class RunArtifact:
    config: ExperimentConfig
    initial_metrics: MetricsReport
    records: list[RoundRecord]
    final_model: ModelParams
    malicious_ids: list[int]
    test_fingerprint: str
    timings: dict[str, float]
    early_stop: str | None = None

    @property
    def final_metrics(self) -> MetricsReport:
        for r in reversed(self.records):
            if r.metrics is not None:
                return r.metrics
        return self.initial_metrics

    def to_json(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "malicious_ids": self.malicious_ids,
            "test_fingerprint": self.test_fingerprint,
            "initial_metrics": self.initial_metrics.to_json(),
            "final_metrics": self.final_metrics.to_json(),
            "rounds": [r.to_json() for r in self.records],
            "final_model": {
                "input_dim": self.final_model.shape.input_dim,
                "hidden_dims": list(self.final_model.shape.hidden_dims),
                "activation": self.final_model.shape.activation,
                "num_classes": self.final_model.shape.num_classes,
                "flat": self.final_model.flat.tolist(),
            },
            "timings": self.timings,
            "early_stop": self.early_stop,
        }


@dataclass
class FederationState:
    global_model: ModelParams
    clients: list[ClientState]
    blacklist: Blacklist
    history: agg.ClientHistory = field(default_factory=agg.ClientHistory)


@dataclass(frozen=True)
class Setup:
    clients: list[ClientState]
    test: Dataset
    shape: ModelShape
    malicious_ids: list[int]


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def select_clients(pool, blacklist, participants: int, seed: int, round_: int) -> list[int]:
    """Uniform sample without replacement from ``pool - blacklist``, sorted."""
    listed = blacklist.members if isinstance(blacklist, Blacklist) else set(blacklist)
    available = sorted(set(pool) - set(listed))
    if not available:
        raise RuntimeError("all clients blacklisted")
    k = min(participants, len(available))
    picked = _rng(seed, round_, 101).choice(available, size=k, replace=False)
    return sorted(int(c) for c in picked)


def _split_test(data: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    order = _rng(seed, 202).permutation(len(data))
    cut = int(round(len(data) * fraction))
    return data.subset(np.sort(order[cut:])), data.subset(np.sort(order[:cut]))


def build_setup(cfg: ExperimentConfig) -> Setup:
    ordering = cfg.ordering
    if cfg.dataset == "synthetic":
        per_class = cfg.samples_per_class + cfg.test_samples_per_class
        full = generate_synthetic(len(ordering), per_class, cfg.input_dim, cfg.class_separation,
                                  [cfg.seed, 303], ordering)
        test_mask = np.zeros(len(full), dtype=bool)
        for c in range(len(ordering)):
            idx = np.flatnonzero(full.labels == c)
            test_mask[idx[: cfg.test_samples_per_class]] = True
        train, test = full.subset(np.flatnonzero(~test_mask)), full.subset(np.flatnonzero(test_mask))
    else:
        train = load_csv(cfg.dataset, cfg.label_column, ordering)
        if cfg.test_path:
            test = load_csv(cfg.test_path, cfg.label_column, ordering)
        else:
            train, test = _split_test(train, cfg.test_fraction, cfg.seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        parts = dirichlet_partition(train, PartitionSpec(cfg.num_clients, cfg.alpha, cfg.seed))
    clients = [ClientState(i, d) for i, d in enumerate(parts)]
    malicious = sorted(int(i) for i in _rng(cfg.seed, 404).permutation(cfg.num_clients)[: cfg.num_malicious])
    clients = apply_roster(clients, AdversaryRoster(frozenset(malicious), cfg.flip))
    shape = ModelShape(train.input_dim, tuple(cfg.hidden_dims), len(ordering), cfg.activation)
    return Setup(clients, test, shape, malicious)


def evaluate(model: ModelParams, test: Dataset, flip: FlipSpec) -> MetricsReport:
    cm = confusion_matrix(test.labels, predict_batch(model, test.features), test.num_classes)
    return standard_metrics(cm, flip)


def _aggregate(cfg: ExperimentConfig, state: FederationState, bundle: agg.UpdateBundle, record: RoundRecord):
    p = len(bundle)
    name = cfg.aggregator
    if name == "fedavg":
        return agg.fedavg(bundle)
    if name == "krum":
        f = agg.default_krum_f(p) if cfg.krum_f is None else cfg.krum_f
        return agg.krum(bundle, f)
    if name == "tmean":
        k = agg.default_trim_k(p) if cfg.trim_k is None else cfg.trim_k
        return agg.trimmed_mean(bundle, k)
    if name == "median":
        return agg.median(bundle)
    if name == "foolsgold":
        model, state.history, _ = agg.foolsgold(bundle, state.history)
        return model
    if name == "flame":
        if p < 2:
            return agg.fedavg(bundle)
        return agg.flame(bundle, cfg.flame_noise, seed=[cfg.seed, bundle.round, 505])
    if name == "flare":
        model, state.blacklist, info = flare_aggregate(bundle, state.blacklist, cfg.ordering)
        record.identified_sr, record.identified_tr = info.source, info.target
        record.ambiguous = info.ambiguous
        record.outliers = info.outliers
        record.flags += info.warnings
        return model
    raise ConfigError(f"unknown aggregator {name!r}")


def run_round(state: FederationState, cfg: ExperimentConfig, t: int, test: Dataset | None = None,
              timings: dict | None = None, evaluate_now: bool = True) -> tuple[FederationState, RoundRecord]:
    timings = timings if timings is not None else {}
    selected = select_clients(range(len(state.clients)), state.blacklist, cfg.participants, cfg.seed, t)
    clients = {c.client_id: c for c in state.clients}
    train_cfg = cfg.train_config

    tick = time.perf_counter()

    def train(cid):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return local_train(state.global_model, clients[cid].data, train_cfg, [cfg.seed, t, cid, 606])

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            local_models = list(pool.map(train, selected))
    else:
        local_models = [train(c) for c in selected]
    timings["train"] = timings.get("train", 0.0) + time.perf_counter() - tick

    sizes = [len(clients[c].data) for c in selected]
    record = RoundRecord(
        round=t,
        selected=selected,
        sizes=sizes,
        malicious_selected=[c for c in selected if clients[c].malicious],
    )
    bundle = agg.UpdateBundle.build(t, state.global_model, local_models, sizes, selected)

    tick = time.perf_counter()
    try:
        new_model = _aggregate(cfg, state, bundle, record)
    except (ValueError, RuntimeError) as exc:
        record.flags.append(f"aggregation failed, keeping previous model: {exc}")
        log.warning(record.flags[-1])
        new_model = state.global_model
    timings["aggregate"] = timings.get("aggregate", 0.0) + time.perf_counter() - tick

    state.global_model = new_model
    for cid in selected:
        c = clients[cid]
        clients[cid] = dataclasses.replace(c, participation=c.participation + (t,))
    state.clients = [clients[c.client_id] for c in state.clients]
    record.blacklist = sorted(state.blacklist.members)

    if evaluate_now and test is not None:
        tick = time.perf_counter()
        record.metrics = evaluate(new_model, test, cfg.flip)
        timings["evaluate"] = timings.get("evaluate", 0.0) + time.perf_counter() - tick
    return state, record


def run_experiment(cfg: ExperimentConfig, persist: bool = True) -> RunArtifact:
    cfg.validate()
    timings: dict[str, float] = {}
    tick = time.perf_counter()
    setup = build_setup(cfg)
    model = init_model(setup.shape, [cfg.seed, 707])
    timings["setup"] = time.perf_counter() - tick
    fingerprint = setup.test.fingerprint()
    state = FederationState(model, list(setup.clients), Blacklist(cfg.blacklist_threshold))
    initial = evaluate(model, setup.test, cfg.flip)

    records, early = [], None
    for t in range(1, cfg.rounds + 1):
        do_eval = t % cfg.eval_every == 0 or t == cfg.rounds
        try:
            state, rec = run_round(state, cfg, t, setup.test, timings, do_eval)
        except RuntimeError as exc:
            early = f"stopped before round {t}: {exc}"
            log.warning(early)
            break
        records.append(rec)
    if setup.test.fingerprint() != fingerprint:
        raise RuntimeError("held-out test set changed during the run")

    artifact = RunArtifact(cfg, initial, records, state.global_model, setup.malicious_ids,
                           fingerprint, timings, early)
    if persist:
        out = resolve_output_dir(cfg)
        if out is not None:
            write_artifact(artifact, out)
    return artifact


def resolve_output_dir(cfg: ExperimentConfig) -> Path | None:
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    return Path(cfg.output_dir) if cfg.output_dir else None


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    return v


def write_artifact(artifact: RunArtifact, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "rounds.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROUND_COLUMNS)
        w.writeheader()
        for r in artifact.records:
            w.writerow({k: _fmt(v) for k, v in r.csv_row().items()})
    with (out / "run.json").open("w") as fh:
        json.dump(artifact.to_json(), fh, indent=1)
    return out


def summarize(artifact: RunArtifact) -> dict:
    m = artifact.final_metrics
    cfg = artifact.config
    bl = set(artifact.records[-1].blacklist) if artifact.records else set()
    mal = set(artifact.malicious_ids)
    return {
        "aggregator": cfg.aggregator,
        "num_malicious": cfg.num_malicious,
        "seed": cfg.seed,
        "gacc": m.gacc,
        "srec": m.srec,
        "asr": m.asr,
        "weighted_error": m.weighted_error,
        "bl_size": len(bl),
        "bl_true_positives": len(bl & mal),
        "bl_false_positives": len(bl - mal),
        "seconds": sum(artifact.timings.values()),
    }
