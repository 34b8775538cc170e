from __future__ import annotations

from typing import Iterable

import numpy as np

from .errors import UsageError
from .tensor import Parameter

RMSPROP_DECAY = 0.99
RMSPROP_EPSILON = 1e-8


def rmsprop_step(
    params: Iterable[Parameter],
    learning_rate: float,
    decay: float = RMSPROP_DECAY,
    epsilon: float = RMSPROP_EPSILON,
) -> None:
    """One in-place RMSprop update.

    ``acc <- decay * acc + (1 - decay) * g**2`` then
    ``value <- value - lr * g / (sqrt(acc) + eps)``.  Gradients are left in
    place; the caller zeroes them before the next backward pass.
    """
    params = list(params)
    missing = [p.name or repr(p) for p in params if p.grad is None]
    if missing:
        raise UsageError(f"rmsprop_step: no gradient for {', '.join(missing[:5])}"
                         + (" ..." if len(missing) > 5 else ""))
    for p in params:
        g = p.grad
        acc = p.accumulator
        acc *= decay
        acc += (1.0 - decay) * (g * g)
        p.data -= learning_rate * g / (np.sqrt(acc) + epsilon)
