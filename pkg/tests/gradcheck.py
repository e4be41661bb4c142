"""Central finite-difference gradient oracle, independent of the engine."""

from __future__ import annotations

import numpy as np

from bandfuse import autodiff as ad


def finite_diff_grad(forward, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d forward() / d x by central differences, perturbing x in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = forward()
        flat[i] = orig - h
        fm = forward()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a.reshape(-1))
    nb = np.linalg.norm(b.reshape(-1))
    # the 1e-6 floor keeps structurally-zero gradients (only finite-difference
    # noise on both sides) from blowing up the relative metric
    return float(np.linalg.norm((a - b).reshape(-1)) / max(na + nb, 1e-6))


def check_gradients(make_case, seeds=range(5), h: float = 1e-5, tol: float = 1e-4):
    """For each seed, make_case(rng) -> (list of float64 leaf Tensors, forward).

    ``forward()`` must rebuild the graph from current tensor data and
    return a scalar Tensor. Engine gradients must match the finite
    difference oracle within ``tol`` relative error.
    """
    for seed in seeds:
        rng = np.random.default_rng(seed)
        leaves, forward = make_case(rng)
        for t in leaves:
            t.requires_grad = True
            t.grad = None
        loss = forward()
        assert loss.dtype == np.float64, "gradient checks must run in 64-bit mode"
        ad.backward(loss)
        for idx, t in enumerate(leaves):
            got = t.grad if t.grad is not None else np.zeros_like(t.data)
            want = finite_diff_grad(lambda: forward().item(), t.data, h)
            err = relative_error(got, want)
            assert err < tol, f"seed {seed} leaf {idx}: rel err {err:.2e} >= {tol}"
