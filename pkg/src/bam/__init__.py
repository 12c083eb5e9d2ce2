"""Bayesian allocation models: exact, SMC and variational marginal likelihoods."""

__version__ = "0.1.0"

from .model import ModelError, ModelSpec, PriorSpec, build_catalog_model, latent_cards  # noqa: E402
from .tensor import SparseCountTensor, read_tensor, write_tensor  # noqa: E402

__all__ = [
    "ModelError", "ModelSpec", "PriorSpec", "SparseCountTensor", "__version__",
    "build_catalog_model", "latent_cards", "read_tensor", "write_tensor",
]
