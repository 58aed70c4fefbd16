"""Simulator and analysis toolkit for hybrid data/model-parallel SGD on conv nets."""

from hpsim.cluster import Cluster, ClusterConfig, StepTrace
from hpsim.config import RunConfig, load_config
from hpsim.cost import CostParams, Topology, scheme_step_model
from hpsim.data import DatasetSpec, generate
from hpsim.estimator import HybridParallelClassifier
from hpsim.model import ConvLayer, FCLayer, Model, ModelSpec, count_stats, init_model
from hpsim.optimizer import HyperParams, lr_at, momentum_update
from hpsim.reference import SingleWorkerSGD

__all__ = [
    "Cluster",
    "ClusterConfig",
    "ConvLayer",
    "CostParams",
    "DatasetSpec",
    "FCLayer",
    "HybridParallelClassifier",
    "HyperParams",
    "Model",
    "ModelSpec",
    "RunConfig",
    "SingleWorkerSGD",
    "StepTrace",
    "Topology",
    "count_stats",
    "generate",
    "init_model",
    "load_config",
    "lr_at",
    "momentum_update",
    "scheme_step_model",
]

__version__ = "0.1.0"
