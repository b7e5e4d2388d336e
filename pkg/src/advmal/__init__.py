"""Adversarial attacks and defenses for neural malware detectors on binary features."""
from .attacks import AttackConfig, AttackKind, AttackResult, run_attack
from .data import Dataset, SynthSpec, generate_synthetic, load_dataset
from .harness import Metrics, Report, evaluate_attack, evaluate_model, run_experiment
from .nn import LayerSpec, Network, TrainConfig, init_network, train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackKind", "AttackResult", "run_attack",
    "Dataset", "SynthSpec", "generate_synthetic", "load_dataset",
    "Metrics", "Report", "evaluate_attack", "evaluate_model", "run_experiment",
    "LayerSpec", "Network", "TrainConfig", "init_network", "train",
]
