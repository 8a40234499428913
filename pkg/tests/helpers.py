"""Shared test oracles: central finite differences and tolerance checks."""

from __future__ import annotations

import numpy as np

from covertalign.autodiff import Tensor, backward

FD_STEP = 1e-6


def numeric_grad(fn, arrays, which: int, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar fn w.r.t. arrays[which].

    fn receives plain float64 numpy arrays and returns a python float. Every
    coordinate of the chosen array is perturbed by +/-h independently.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[which]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(*arrays)
        flat[i] = orig - h
        fm = fn(*arrays)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray,
                      rel: float = 1e-4, small: float = 1e-4, abs_small: float = 1e-7):
    """Spec tolerance: relative error <= rel, except absolute <= abs_small
    where the analytic value is below `small`."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    assert analytic.shape == numeric.shape
    diff = np.abs(analytic - numeric)
    tiny = np.abs(analytic) < small
    if np.any(tiny):
        worst = diff[tiny].max()
        assert worst <= abs_small, f"absolute error {worst:.3e} > {abs_small:g} on near-zero gradient"
    if np.any(~tiny):
        rel_err = (diff[~tiny] / np.abs(analytic)[~tiny]).max()
        assert rel_err <= rel, f"relative error {rel_err:.3e} > {rel:g}"


def gradcheck(build, arrays, rel: float = 1e-4, h: float = FD_STEP):
    """Check every analytic input gradient of a scalar graph against FD.

    build maps Tensors (float64, requires_grad) to a scalar Tensor; the same
    callable evaluated at perturbed constant inputs supplies the oracle.
    """
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(*tensors)
    backward(out)

    def feval(*arrs):
        return build(*[Tensor(a) for a in arrs]).item()

    for i, t in enumerate(tensors):
        numeric = numeric_grad(feval, arrays, i, h=h)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        assert_grad_close(analytic, numeric, rel=rel)
