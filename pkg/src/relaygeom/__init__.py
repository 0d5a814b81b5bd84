"""Geometric and thermodynamic observers for daily relay populations."""

from .cca import CcaFit, fit_cca
from .cdae import ContractiveDenoisingAutoencoder, CdaeTrainingConfig
from .ejt import EjtBaseline, EjtSplit, eigen_split, ejt_zscore, soft_alignment
from .gates import ChannelVector, EventClass, GateConfig, GateReport, classify_event, evaluate_gates
from .grbm import GaussianRBM
from .harness import (Baselines, ObserverModels, TrainingConfig, fit_baselines, monte_carlo_null,
                      run_sweep, train_models)
from .population import FeatureStandardizer, RobustScaler, WindowFrame
from .schema import FeatureSchema, SchemaError

__version__ = "0.1.0"

__all__ = [
    "Baselines", "CcaFit", "CdaeTrainingConfig", "ChannelVector", "ContractiveDenoisingAutoencoder",
    "EjtBaseline", "EjtSplit", "EventClass", "FeatureSchema", "FeatureStandardizer", "GateConfig",
    "GateReport", "GaussianRBM", "ObserverModels", "RobustScaler", "SchemaError", "TrainingConfig",
    "WindowFrame", "classify_event", "eigen_split", "ejt_zscore", "evaluate_gates", "fit_baselines",
    "fit_cca", "monte_carlo_null", "run_sweep", "soft_alignment", "train_models",
]
