"""Reverse-mode gradients and forward-mode Jacobian-vector products."""

import numpy as np

from llr.autodiff.graph import Node, add, as_node, leaf, no_record
from llr.errors import ContractError, ShapeError


def topological_order(output):
    """Nodes reachable from ``output``, every parent listed before its children."""
    order = []
    visited = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def iter_graph(output):
    return iter(topological_order(output))


def _dependents(order, sources):
    """ids of nodes in ``order`` that depend on any node in ``sources``."""
    live = {id(s) for s in sources}
    for node in order:
        if id(node) not in live and any(id(p) in live for p in node.parents):
            live.add(id(node))
    return live


def evaluate(node):
    """The memoized forward value of ``node`` (a read-only float64 array)."""
    return as_node(node).value


def grad(output, wrt, create_graph=False):
    """Gradient of the scalar ``output`` with respect to each node in ``wrt``.

    With ``create_graph=False`` the results are plain arrays.  With
    ``create_graph=True`` they are graph nodes whose backward pass was itself
    recorded, so they can be differentiated again (gradient-of-gradient).

    A node in ``wrt`` that ``output`` does not depend on gets a zero gradient
    of its own shape.
    """
    single = isinstance(wrt, Node)
    targets = [wrt] if single else list(wrt)
    if output.shape != ():
        raise ContractError(f"grad: output must be a scalar, got shape {list(output.shape)}")

    if create_graph:
        grads = _backward(output, targets)
    else:
        with no_record():
            grads = _backward(output, targets)
        grads = [g.value for g in grads]
    return grads[0] if single else grads


def _backward(output, targets):
    order = topological_order(output)
    live = _dependents(order, targets)
    wanted = {id(t) for t in targets}
    found = {}
    accum = {id(output): leaf(np.ones(()))}
    for node in reversed(order):
        g = accum.pop(id(node), None)
        if g is None:
            continue
        if id(node) in wanted:
            found[id(node)] = g
        if node.op is None:
            continue
        needs = tuple(id(p) in live for p in node.parents)
        if not any(needs):
            continue
        parent_grads = node.op.vjp(node, g, needs)
        for p, pg, need in zip(node.parents, parent_grads, needs):
            if not need or pg is None:
                continue
            prev = accum.get(id(p))
            accum[id(p)] = pg if prev is None else add(prev, pg)
    return [found[id(t)] if id(t) in found else leaf(np.zeros(t.shape)) for t in targets]


def jvp(output, wrt, direction):
    """Directional derivative of ``output`` along ``direction`` at ``wrt``.

    Tangents are pushed forward through the graph one primitive at a time;
    nothing is recorded.  Returns an array shaped like ``output``.
    """
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != wrt.shape:
        raise ShapeError("jvp", wrt.shape, direction.shape, detail="direction must match the input")
    order = topological_order(output)
    tangents = {id(wrt): direction}
    for node in order:
        if node.op is None or id(node) in tangents:
            continue
        ins = [tangents.get(id(p)) for p in node.parents]
        if all(t is None for t in ins):
            continue
        tangents[id(node)] = np.asarray(node.op.jvp(node, ins), dtype=np.float64)
    out = tangents.get(id(output))
    return np.zeros(output.shape) if out is None else np.broadcast_to(out, output.shape).copy()
