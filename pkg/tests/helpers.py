"""Shared builders and the finite-difference checker."""

from __future__ import annotations

import numpy as np

from towerseg.cloud_model import ClassLabel, HeightFrame, PointCloud, Window


def make_cloud(n=100, seed=0, frame=HeightFrame.HAG, extent=80.0, z_max=30.0, labels=None):
    rng = np.random.default_rng(seed)
    data = np.empty((n, 8), dtype=np.float32)
    data[:, :2] = rng.uniform(0, extent, size=(n, 2))
    data[:, 2] = rng.uniform(0.1, z_max, size=n)
    data[:, 3:] = rng.uniform(0, 1, size=(n, 5))
    if labels is None:
        labels = rng.choice([ClassLabel.GROUND, ClassLabel.BACKGROUND], size=n)
    return PointCloud(data, labels, frame)


def make_window(z, seed=0, side=40.0, labels=None, block="blk"):
    """Window centred at (20, 20) with the given heights."""
    z = np.asarray(z, dtype=np.float64)
    rng = np.random.default_rng(seed)
    data = np.empty((len(z), 8), dtype=np.float32)
    data[:, :2] = rng.uniform(0.5, side - 0.5, size=(len(z), 2))
    data[:, 2] = z
    data[:, 3:] = rng.uniform(0, 1, size=(len(z), 5))
    if labels is None:
        labels = np.full(len(z), ClassLabel.BACKGROUND)
    return Window(side / 2, side / 2, side, data, labels, block, np.arange(len(z)))


ABS_TOL = 1e-6  # absolute agreement accepted for gradients near zero


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(num, ana):
    """Norm-wise relative error ``|num - ana| / (|num| + |ana|)``; 0 when both vanish."""
    num, ana = np.ravel(num), np.ravel(ana)
    den = np.linalg.norm(num) + np.linalg.norm(ana)
    return 0.0 if den == 0 else float(np.linalg.norm(num - ana) / den)


def grad_error(num, ana, atol=ABS_TOL):
    """Relative error, or 0 when every entry agrees within ``atol``.

    Near-zero gradients (a bias feeding a batch norm, paths through a
    two-sample batch norm) leave only finite-difference round-off, which no
    relative measure can resolve.
    """
    if np.max(np.abs(np.ravel(num) - np.ravel(ana)), initial=0.0) <= atol:
        return 0.0
    return rel_error(num, ana)


def tiny_spec(task="cls", **kw):
    """A float64-friendly network small enough for exhaustive finite differences."""
    from towerseg.pointnet_models import ArchitectureSpec
    base = dict(variant="custom", task=task, k=2, stage_a=(5, 6), stage_b=(6, 7, 8),
                head=(7, 5) if task == "cls" else (7, 6, 5), tnet_head=(6, 5), dropout_rate=0.0)
    base.update(kw)
    return ArchitectureSpec(**base)


def model_grad_errors(model, x, targets, weights, coef=1e-3, seed=0):
    """Relative FD error of the weighted NLL (plus penalty) per parameter and for the input.

    Float64 model in train mode. The T-Net output layers are perturbed away
    from their zero initialisation so every parameter gets a gradient.
    """
    from towerseg.nn_engine import log_softmax, log_softmax_backward, weighted_nll_loss
    rng = np.random.default_rng(seed)
    for name, p in model.parameters().items():
        if "tnet.out" in name:
            p.data += rng.normal(scale=0.1, size=p.shape)
    model.train()
    k = model.spec.k

    def loss():
        lp = log_softmax(model.forward(x).reshape(-1, k))
        return weighted_nll_loss(lp, targets, weights)[0] + coef * model.penalty

    model.zero_grad()
    logits = model.forward(x)
    lp = log_softmax(logits.reshape(-1, k))
    _, g = weighted_nll_loss(lp, targets, weights)
    gx = model.backward(log_softmax_backward(lp, g).reshape(logits.shape), coef)
    analytic = {name: p.grad.copy() for name, p in model.parameters().items()}
    errors = {"<input>": grad_error(numeric_grad(loss, x), gx)}
    for name, p in model.parameters().items():
        errors[name] = grad_error(numeric_grad(loss, p.data), analytic[name])
    return errors
