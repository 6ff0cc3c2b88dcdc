"""Two-layer blockchain federated learning simulator.

Sharded consortium subchains coordinate synchronous device training; a DAG
mainchain merges shard models asynchronously. FedAvg and AsynFL baselines
share the same task, devices and random streams for fair comparison.
"""

from .errors import ChainFLError, ConfigError, IterationError
from .model_math import HyperParams, LabeledDataset, asynfl_update, local_train, sgd_step, weighted_aggregate

__all__ = [
    "ChainFLError",
    "ConfigError",
    "HyperParams",
    "IterationError",
    "LabeledDataset",
    "asynfl_update",
    "local_train",
    "sgd_step",
    "weighted_aggregate",
]

__version__ = "0.1.0"
