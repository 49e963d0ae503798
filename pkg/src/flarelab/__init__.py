"""Federated-learning poisoning lab: label-flipping attacks, robust aggregators and a
neuron-wise output-layer defense, runnable end to end on synthetic or CSV data."""
from .adversary import AdversaryRoster, ClientState, FlipSpec, apply_roster, flip_labels
from .aggregators import UpdateBundle, fedavg, flame, foolsgold, krum, median, trimmed_mean
from .clustering import NOISE, ClusterResult, hdbscan
from .data import Dataset, HazardOrdering, PartitionSpec, dirichlet_partition, generate_synthetic, load_csv
from .flare import Blacklist, flare_aggregate, identify_source_target, neuron_magnitudes
from .harness import ExperimentConfig, RoundRecord, RunArtifact, run_experiment
from .metrics import MetricsReport, confusion_matrix, standard_metrics, weighted_distance, weighted_error
from .nn import ModelParams, ModelShape, TrainConfig, init_model, local_train

__version__ = "0.1.0"
