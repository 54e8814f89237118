from .gradcheck import grad_check
from .ops import (
    IGNORE_INDEX,
    add,
    add_bias,
    bmm,
    causal_attention,
    concat,
    cross_entropy,
    embedding,
    gelu,
    layer_norm,
    linear,
    matmul,
    mean_pool,
    mul,
    prefix,
    relu,
    reshape,
    scale,
    softmax,
    sub,
    sum_all,
    tanh,
    transpose,
)
from .rng import stream
from .tensor import (
    Graph,
    GraphError,
    NonFiniteError,
    NumcoreError,
    ShapeError,
    Tensor,
    backward,
    constant,
    corrupt_gradient,
    current_graph,
    finite_checks,
    get_dtype,
    get_precision,
    new_graph,
    no_grad,
    precision,
    set_precision,
    tensor,
)
