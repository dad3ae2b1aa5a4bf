"""Similarity-aware post-hoc calibration toolkit for graph node classifiers.

Modules
-------
numerics    reverse-mode tape, Adam, finite-difference gradient checks
graph       CSR graphs and structural node statistics
datagen     contextual stochastic block model generator
classifier  two-layer GCN producing the frozen bundle (H, Z)
metrics     ECE / ACE / NLL / accuracy and reliability tables
baselines   TS, VS, ETS, and a GCN-on-logits nodewise calibrator
calibrator  the two-branch similarity-aware calibrator
theory      Monte Carlo lab for the two-node Gaussian model
cli         command-line orchestration and file formats
"""

__version__ = "0.1.0"

from .baselines import CagcnModel, EtsModel, TsModel, VsModel, fit_cagcn, fit_ets, fit_ts, fit_vs
from .calibrator import (
    PrototypeSet,
    SimCalibConfig,
    SimCalibModel,
    grid_search,
    train_simcalib,
)
from .classifier import GcnConfig, GcnParams, NodeBundle, gcn_forward, make_bundle, train_gcn
from .datagen import CsbmParams, gen_csbm
from .graph import Graph, StructuralProfile, build_graph, normalized_adjacency
from .metrics import CalibReport, ReliabilityTable, ace, compute_report, ece, nll, reliability
from .theory import GaussianWorld, make_world, mc_ece, run_trials, sweep

__all__ = [
    "CagcnModel",
    "CalibReport",
    "CsbmParams",
    "EtsModel",
    "GaussianWorld",
    "GcnConfig",
    "GcnParams",
    "Graph",
    "NodeBundle",
    "PrototypeSet",
    "ReliabilityTable",
    "SimCalibConfig",
    "SimCalibModel",
    "StructuralProfile",
    "TsModel",
    "VsModel",
    "__version__",
    "ace",
    "build_graph",
    "compute_report",
    "ece",
    "fit_cagcn",
    "fit_ets",
    "fit_ts",
    "fit_vs",
    "gcn_forward",
    "gen_csbm",
    "grid_search",
    "make_bundle",
    "make_world",
    "mc_ece",
    "nll",
    "normalized_adjacency",
    "reliability",
    "run_trials",
    "sweep",
    "train_gcn",
    "train_simcalib",
]
