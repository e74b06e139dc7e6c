"""Fingerprint-based Byzantine filtering for federated learning, with
baseline aggregators, attack models and a deterministic simulator."""

from .attacks import AttackChoice, adaptive_pgd_attack, apply_attack
from .baselines import AggregatorChoice, coord_median, fedavg_mean, foolsgold, krum, trimmed_mean
from .detector import AnomalyReport, DetectorConfig, tinyguard_aggregate
from .errors import ConfigurationError, DimensionError, FormatError, NumericInputError
from .fingerprint import Fingerprint, extract_fingerprint
from .model import GradientUpdate, LayerLayout, ModelParams
from .simulator import ExperimentConfig, run_experiment

__version__ = "0.1.0"
