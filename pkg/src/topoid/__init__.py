"""Distribution-feeder topology identification from DER and substation meters."""

from .anomaly import AnomalyVerdict, calibrate_threshold, detect, likelihood_ratio
from .dataset import Dataset, read_dataset, write_dataset
from .errors import NumericalError, TopoIdError, ValidationError
from .model import DaModel, Observation, PredictorSchema, TopologyLabel, classify, fit
from .recovery import BoxQp, RecoveryResult, recover, solve_box_qp

__version__ = "0.1.0"

__all__ = [
    "AnomalyVerdict", "BoxQp", "DaModel", "Dataset", "NumericalError", "Observation",
    "PredictorSchema", "RecoveryResult", "TopoIdError", "TopologyLabel", "ValidationError",
    "calibrate_threshold", "classify", "detect", "fit", "likelihood_ratio", "read_dataset",
    "recover", "solve_box_qp", "write_dataset", "__version__",
]
