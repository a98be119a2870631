"""ndgrad: a small numpy autodiff engine and the layers built on it."""

from ministar.ndgrad import ops
from ministar.ndgrad.checkpoint import load_params, save_params
from ministar.ndgrad.optim import Adam, clip_by_global_norm, global_norm
from ministar.ndgrad.store import ParamStore, Snapshot, params_digest
from ministar.ndgrad.tensor import GradTape, Parameter, Tensor, precision

__all__ = [
    "Adam",
    "GradTape",
    "Parameter",
    "ParamStore",
    "Snapshot",
    "Tensor",
    "clip_by_global_norm",
    "global_norm",
    "load_params",
    "ops",
    "params_digest",
    "precision",
    "save_params",
]
