from .tensor import (
    NEG_MASK,
    VAR_FLOOR,
    Context,
    Tape,
    Tensor,
    add,
    causal_mask,
    concat_rows,
    constant,
    dropout,
    embedding,
    finite_checks,
    label_smoothed_ce,
    layer_norm,
    linear,
    matmul,
    mean_rows,
    multi_head_attention,
    relu,
    scale,
    softmax_rows,
    sq_l2,
    stop_gradient,
    straight_through,
)
from .optim import OptimizerState, adam_step, clip_global_norm, lr_at
from .gradcheck import GradReport, grad_check
