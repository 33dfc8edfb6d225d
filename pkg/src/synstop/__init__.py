"""Federated learning simulator with proxy-validation early stopping."""

from .data import GeneratorConfig, TaskSpec, dirichlet_partition, make_proxy_valset, make_task
from .earlystop import (
    MonitorState,
    evaluate,
    monitor_update,
    oracle_best_round,
    relative_improvement,
    scan_stop_round,
)
from .fed import FedConfig, edge_opt, run_round, sample_clients, server_opt
from .harness import ExperimentConfig, aggregate, report, run_experiment, sweep
from .model import Arch, ModelParams, bce_with_logits, forward, grad_check, local_gradient, local_loss, predict

__version__ = "0.1.0"
