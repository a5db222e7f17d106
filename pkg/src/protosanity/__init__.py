"""Prototype-part networks with saliency sanity checks on desk-scale data."""

from .bundle import load_model, save_model
from .data import Dataset, generate_to_disk, make_synthetic, read_manifest
from .errors import (
    BundleError,
    EmptySelectionError,
    InvalidArgumentError,
    InvalidStateError,
    ProtoSanityError,
    UndefinedRatioError,
)
from .estimator import ProtoPartClassifier
from .metrics import audc, deletion_curve, effective_rf_area, relevance
from .network import Network, analytic_receptive_field, build_network, forward
from .pipeline import RunConfig
from .prototypes import PrototypeModel, project_prototypes, train_toy
from .saliency import METHODS, compute_saliency, extract_patch

__version__ = "0.1.0"

__all__ = [
    "BundleError",
    "Dataset",
    "EmptySelectionError",
    "InvalidArgumentError",
    "InvalidStateError",
    "METHODS",
    "Network",
    "ProtoPartClassifier",
    "ProtoSanityError",
    "PrototypeModel",
    "RunConfig",
    "UndefinedRatioError",
    "analytic_receptive_field",
    "audc",
    "build_network",
    "compute_saliency",
    "deletion_curve",
    "effective_rf_area",
    "extract_patch",
    "forward",
    "generate_to_disk",
    "load_model",
    "make_synthetic",
    "project_prototypes",
    "read_manifest",
    "relevance",
    "save_model",
    "train_toy",
]
