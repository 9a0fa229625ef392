"""A small reverse-mode tape over numpy arrays.

Arrays are tracked by object identity. Every op that receives a tape appends
one node holding its cached inputs and a closure mapping the output gradient
to input gradients. :func:`backward` replays the nodes once, newest first.
"""

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass
class Node:
    op: str
    out: np.ndarray
    inputs: tuple
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradientTape:
    nodes: list = field(default_factory=list)
    watched: dict = field(default_factory=dict)  # id(array) -> (name, array)

    def watch(self, array: np.ndarray, name: str) -> np.ndarray:
        """Mark ``array`` as a leaf whose gradient :func:`backward` should report."""
        self.watched[id(array)] = (name, array)
        return array

    def record(self, op: str, out: np.ndarray, inputs: tuple, grad_fn) -> np.ndarray:
        self.nodes.append(Node(op, out, tuple(inputs), grad_fn))
        return out

    def __len__(self) -> int:
        return len(self.nodes)


def backward(tape: GradientTape, seed=1.0, output: np.ndarray | None = None, visit_log: list | None = None) -> dict:
    """Propagate ``seed`` from ``output`` (default: the last recorded result).

    Returns a dict mapping every watched name to its gradient; leaves that the
    output does not depend on get exact zeros.
    """
    if not tape.nodes:
        raise ValueError("empty tape")
    if output is None:
        output = tape.nodes[-1].out
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != np.shape(output):
        seed = np.broadcast_to(seed, np.shape(output)).copy()

    grads: dict[int, np.ndarray] = {id(output): seed}
    for node in reversed(tape.nodes):
        if visit_log is not None:
            visit_log.append(node.op)
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.grad_fn(g)):
            if gi is None or not isinstance(inp, np.ndarray):
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return {name: grads.get(key, np.zeros_like(arr)) for key, (name, arr) in tape.watched.items()}
