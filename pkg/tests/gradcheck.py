"""Central finite-difference gradient oracle shared by the test suite."""

from __future__ import annotations

import numpy as np

from finemoe.tensor import Tensor, backward, reset_graph


def eval_scalar(build, arrays):
    reset_graph()
    ts = [Tensor(a) for a in arrays]
    return build(ts).item()


def check_gradients(build, arrays, step: float = 1e-5, rel_tol: float = 1e-4):
    """Compare autodiff gradients of ``build`` against central differences.

    ``build`` maps a list of Tensors to a scalar Tensor.  The relative
    error per input is ||analytic - numeric|| / max(||analytic||,
    ||numeric||, 1e-12), which must stay below ``rel_tol``.
    """
    reset_graph()
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(tensors)
    backward(loss)
    analytic = [t.grad.copy() for t in tensors]

    for k, base in enumerate(arrays):
        numeric = np.zeros_like(base, dtype=np.float64)
        flat = numeric.reshape(-1)
        for i in range(flat.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k].reshape(-1)[i] += step
            minus[k].reshape(-1)[i] -= step
            flat[i] = (eval_scalar(build, plus) - eval_scalar(build, minus)) / (2 * step)
        a_norm = np.linalg.norm(analytic[k])
        n_norm = np.linalg.norm(numeric)
        err = np.linalg.norm(analytic[k] - numeric) / max(a_norm, n_norm, 1e-12)
        assert err < rel_tol, (
            f"gradient mismatch on input {k}: relative error {err:.3e}\n"
            f"analytic:\n{analytic[k]}\nnumeric:\n{numeric}")
    reset_graph()
