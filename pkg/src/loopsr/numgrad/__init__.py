"""Small float64 autodiff core: tensors, layers, Adam and gradient checking."""

from loopsr.numgrad.checkpoint import dumps_weights, load_weights, loads_weights, save_weights
from loopsr.numgrad.gradcheck import analytic_grads, grad_check, relative_error
from loopsr.numgrad.layers import (
    MLP,
    Affine,
    LayerNorm,
    ParamSet,
    affine_forward,
    attention_block,
    init_attention_params,
    xavier_uniform,
)
from loopsr.numgrad.optim import Adam, AdamState, adam_update
from loopsr.numgrad.tensor import (
    NumericalError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    concat,
    gelu,
    layer_norm,
    log_softmax,
    maximum,
    minimum,
    softmax,
    where,
)
