from hsattn.autodiff.functional import (
    BATCH_NORM_EPS,
    BATCH_NORM_MOMENTUM,
    LAYER_NORM_EPS,
    SELU_ALPHA,
    SELU_LAMBDA,
    batch_norm,
    conv1d,
    conv2d,
    layer_norm,
    linear,
    log_softmax,
    max_pool2d,
    relu,
    selu,
    sigmoid,
    softmax,
    tanh,
)
from hsattn.autodiff.gradcheck import analytic_grad, grad_check, grad_check_all, numeric_grad, relative_error
from hsattn.autodiff.tensor import (
    Tensor,
    add,
    as_tensor,
    clamp_min,
    concat,
    div,
    exp,
    flatten,
    getitem,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    stack,
    sub,
    tmax,
    transpose,
    tsum,
)
