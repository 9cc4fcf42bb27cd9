"""Bayesian threshold model for multi-stage decision funnels with selectively observed outcomes."""

from .model import FunnelConfig, ModelParams, PatientRecord, PriorSpec
from .riskdist import RiskDistributionParams

__all__ = ["FunnelConfig", "ModelParams", "PatientRecord", "PriorSpec", "RiskDistributionParams"]
__version__ = "0.1.0"
