"""Two-stage personalized federated learning: a shared encoder trained with a
supervised contrastive loss, then per-client classifier heads on top of it."""

from .data import (ClientPartition, LabeledDataset, client_view, dirichlet_partition,
                   synth_gaussian_mixture)
from .federation import (FederationConfig, adapt_new_client, aggregate, run_baseline,
                         run_crl, run_pcl, sample_clients)
from .numerics import RngStream
from .report import EvalReport, evaluate

__version__ = "0.1.0"

__all__ = [
    "ClientPartition", "EvalReport", "FederationConfig", "LabeledDataset", "RngStream",
    "adapt_new_client", "aggregate", "client_view", "dirichlet_partition", "evaluate",
    "run_baseline", "run_crl", "run_pcl", "sample_clients", "synth_gaussian_mixture",
]
