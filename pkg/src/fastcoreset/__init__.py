"""DNN-free coreset selection by phase-decoupled characteristic-function matching."""

from .cf_core import LossBreakdown, PhasePenaltyParams, cfd_naive, ecf, main_loss, pd_cf_loss
from .errors import FastError, FormatError, InvalidParameterError, NumericalError
from .io import export, ingest
from .manifold_graph import DatasetMatrix, ManifoldGraph, SpectralEmbedding, build_multiscale_graph, spectral_embed
from .optimizer import RunConfig, SelectionResult, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "DatasetMatrix", "ManifoldGraph", "SpectralEmbedding", "build_multiscale_graph", "spectral_embed",
    "LossBreakdown", "PhasePenaltyParams", "cfd_naive", "ecf", "main_loss", "pd_cf_loss",
    "RunConfig", "SelectionResult", "run_pipeline",
    "ingest", "export",
    "FastError", "FormatError", "InvalidParameterError", "NumericalError",
]
