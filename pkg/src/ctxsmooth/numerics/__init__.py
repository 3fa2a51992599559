from .rng import RngStream, sample_standard_normal
from .tensor import Parameter, Tensor, concat, layer_norm, minimum
from .nn import (EnsembleMlp, Linear, Mlp, ensemble_forward_np, mlp_backward,
                 mlp_forward, sinusoidal_embedding)
from .optim import Adam, AdamState, adam_step

__all__ = [
    "RngStream", "sample_standard_normal",
    "Tensor", "Parameter", "concat", "minimum", "layer_norm",
    "Mlp", "EnsembleMlp", "Linear", "ensemble_forward_np", "mlp_forward",
    "mlp_backward",
    "sinusoidal_embedding",
    "Adam", "AdamState", "adam_step",
]
