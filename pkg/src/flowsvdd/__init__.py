"""Flow-based support vector data description (FlowSVDD).

A volume-preserving normalizing flow is trained so that a minimal-volume
hypersphere in its latent space encloses the bulk of the training data;
distance to the sphere center is the anomaly score.
"""

__version__ = "0.1.0"

from .errors import ContractError, DataError, DimensionError, FlowSVDDError, NumericError
from .flow import FlowConfig, FlowModel, flow_forward, flow_inverse, log_jacobian
from .svdd import SvddHead, normalized_embed, optimal_radius_sq, score, svdd_loss
from .train import TrainConfig, fit
from .data import Dataset, make_synthetic
from .metrics import auc, f1_at_ratio, rank_extremes, boundary_grid

__all__ = [
    "ContractError", "DataError", "DimensionError", "FlowSVDDError", "NumericError",
    "FlowConfig", "FlowModel", "flow_forward", "flow_inverse", "log_jacobian",
    "SvddHead", "normalized_embed", "optimal_radius_sq", "score", "svdd_loss",
    "TrainConfig", "fit", "Dataset", "make_synthetic",
    "auc", "f1_at_ratio", "rank_extremes", "boundary_grid",
]
