"""Tensor graph with recordable reverse-mode and forward-mode derivatives."""

from llr.autodiff.engine import evaluate, grad, iter_graph, jvp, topological_order
from llr.autodiff.graph import (
    OPS,
    Node,
    abs_,
    add,
    as_node,
    broadcast_to,
    const,
    conv2d,
    detach,
    div,
    exp,
    is_recording,
    leaf,
    log,
    logsumexp,
    matmul,
    max_,
    mul,
    neg,
    no_record,
    reshape,
    sigmoid,
    slice_,
    softplus,
    sub,
    sum_,
    sum_to,
    transpose,
)
from llr.autodiff.kernels import backend

__all__ = [
    "OPS", "Node", "abs_", "add", "as_node", "backend", "broadcast_to", "const", "conv2d", "detach",
    "div", "evaluate", "exp", "grad", "is_recording", "iter_graph", "jvp", "leaf", "log", "logsumexp",
    "matmul", "max_", "mul", "neg", "no_record", "reshape", "sigmoid", "slice_", "softplus", "sub",
    "sum_", "sum_to", "topological_order", "transpose",
]
