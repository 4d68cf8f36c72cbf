"""Central finite-difference gradient checking.

The check projects the output onto a fixed random tensor so every output
element contributes, then compares the analytic gradient of that scalar with
central differences.  Run under float64.
"""
import numpy as np

from .autodiff import Tensor, backward, default_dtype, functional as F, no_grad


def relative_error(analytic, numeric):
    """Normwise relative error ``max|a - n| / max(max|a|, max|n|)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-10)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def numeric_grad(f, arr, eps=1e-5):
    """d f() / d arr by central differences; ``arr`` is perturbed in place."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def check_gradients(fn, inputs, eps=1e-5, seed=0):
    """Return the relative error per input for ``fn(*inputs) -> Tensor``.

    ``inputs`` are float64 tensors; those with ``requires_grad`` are checked.
    """
    with default_dtype(np.float64):
        out = fn(*inputs)
        proj = np.random.default_rng(seed).standard_normal(out.shape)
        proj_t = Tensor(proj)
        loss = F.sum(F.mul(out, proj_t)) if out.data.ndim else out
        for t in inputs:
            t.grad = None
        backward(loss)
        errors = []
        for t in inputs:
            if not t.requires_grad:
                continue
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)

            def f():
                with no_grad():
                    o = fn(*inputs).data
                return float((o * proj).sum()) if o.ndim else float(o)

            errors.append(relative_error(analytic, numeric_grad(f, t.data, eps)))
        return errors
