from .gradcheck import gradient_error, numerical_gradient, tape_gradient
from .linalg import (DEFAULT_CAP, DimensionCapError, jacobi_eigh, jacobian, row_jacobians,
                     spectral_norm, sym_eig, top_singular)
from .optim import Adam, AdamState, adam_step
from .rng import Rng
from .tensor import (GradTape, NonFiniteError, TapeError, Tensor, as_tensor, backward,
                     forward_op)

__all__ = [
    "Adam", "AdamState", "DEFAULT_CAP", "DimensionCapError", "GradTape", "NonFiniteError",
    "Rng", "TapeError", "Tensor", "adam_step", "as_tensor", "backward", "forward_op", "gradient_error",
    "jacobi_eigh", "jacobian", "numerical_gradient", "row_jacobians", "spectral_norm", "sym_eig", "tape_gradient", "top_singular",
]
