"""Central finite-difference checks of recorded backward rules."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .ops import inner
from .tensor import Tape, Tensor, parameter


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-6,
                    seed: int = 0, wrt: Sequence[int] | None = None) -> float:
    """Largest relative error between analytic and numerical gradients.

    The output of ``fn`` is contracted with a fixed random array so every
    Jacobian entry participates. The error per input is
    ``|g_a - g_n| / max(|g_a|, |g_n|)`` in the Euclidean norm; entries are
    perturbed by ``eps * max(1, |x|)``.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    params = [parameter(a) for a in arrays]
    with Tape() as tape:
        out = fn(*params)
        proj = np.random.default_rng(seed).standard_normal(out.shape)
        loss = inner(out, proj)
    tape.backward(loss)

    def value(args):
        return float(np.vdot(fn(*[Tensor(a) for a in args]).data, proj))

    worst = 0.0
    for i in wrt:
        analytic = params[i].grad if params[i].grad is not None else np.zeros_like(arrays[i])
        numeric = np.zeros_like(arrays[i])
        flat = arrays[i].reshape(-1)
        for j in range(flat.size):
            h = eps * max(1.0, abs(flat[j]))
            orig = flat[j]
            flat[j] = orig + h
            up = value(arrays)
            flat[j] = orig - h
            down = value(arrays)
            flat[j] = orig
            numeric.reshape(-1)[j] = (up - down) / (2 * h)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if denom > 0:
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
