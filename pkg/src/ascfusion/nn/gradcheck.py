"""Central finite-difference checks for layers and whole networks."""
from __future__ import annotations

import numpy as np

from .layers import MaxPool2D, ReLU
from .network import Network

STEP = 1e-5
# float64 round-off in a central difference of an O(1) loss is ~1e-10, so
# gradients smaller than this floor are compared on an absolute scale; this
# matters for gradients that are structurally ~0 (e.g. a bias feeding a
# train-mode batch norm)
SCALE_FLOOR = 1e-5


def relative_error(a, b, floor=SCALE_FLOOR):
    """max |a-b| / max(|a|, |b|, floor) over entries."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def numeric_gradient(f, x, step=STEP, indices=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    idx_iter = indices if indices is not None else np.ndindex(*x.shape)
    for idx in idx_iter:
        old = x[idx]
        x[idx] = old + step
        fp = f()
        x[idx] = old - step
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def check_layer(layer, x, rng, step=STEP, train=True, n_probe=None):
    """Check a layer's parameter and input gradients entrywise.

    The scalar probed is ``sum(forward(x) * R) + l2_penalty()`` for a fixed
    random ``R``, so the analytic upstream gradient is ``R`` and parameter
    gradients include the layer's own weight decay, as ``backward`` reports
    them.  With ``n_probe``, tensors larger than that are checked on a random
    subset of ``n_probe`` entries.  Returns {name: relative error}.
    """
    x = np.array(x, dtype=np.float64)
    out = layer.forward(x, train)
    R = rng.normal(size=out.shape)

    def f():
        return float(np.sum(layer.forward(x, train) * R)) + layer.l2_penalty()

    def compare(arr, analytic):
        if n_probe is None or arr.size <= n_probe:
            return relative_error(numeric_gradient(f, arr, step), analytic)
        flat = rng.choice(arr.size, size=n_probe, replace=False)
        idx = [np.unravel_index(i, arr.shape) for i in flat]
        num = numeric_gradient(f, arr, step, idx)
        return relative_error([num[i] for i in idx], [analytic[i] for i in idx])

    layer.forward(x, train)
    dx = layer.backward(R.copy())
    analytic = {k: np.array(v, dtype=np.float64) for k, v in layer.grads.items()}
    errors = {}
    for name, p in layer.params.items():
        errors[name] = compare(p, analytic[name])
    if dx is not None:
        errors["input"] = compare(x, dx)
    return errors


def pin_routing(network: Network, x):
    """Fix every ReLU mask and pooling argmax at their values for batch ``x``."""
    network.logits(x, train=True)
    for layer in network.layers:
        if isinstance(layer, ReLU):
            layer.route = layer._mask
        elif isinstance(layer, MaxPool2D):
            layer.route = layer._arg


def release_routing(network: Network):
    for layer in network.layers:
        layer.route = None


def check_network(network: Network, x, labels, rng, step=STEP, pin=True):
    """Directional check per parameter tensor of the full training loss.

    For each tensor a random unit direction ``v`` is drawn and the central
    difference of the loss along ``v`` is compared with ``<grad, v>``.  With
    ``pin`` the ReLU masks and pooling argmaxes are held at the unperturbed
    point, so a perturbation cannot straddle a kink, where the difference
    quotient is not a derivative estimate.  Returns {parameter name: error}.
    """
    if network.dtype != np.float64:
        raise TypeError("gradient checks need a float64 network")
    _, grads = network.loss_and_gradients(x, labels)
    grads = {k: np.array(v, dtype=np.float64) for k, v in grads.items()}
    if pin:
        pin_routing(network, x)
    errors = {}
    try:
        for name, p in network.named_params():
            v = rng.normal(size=p.shape)
            v /= np.linalg.norm(v)
            base = p.copy()
            p[...] = base + step * v
            fp = network.loss(x, labels)
            p[...] = base - step * v
            fm = network.loss(x, labels)
            p[...] = base
            errors[name] = relative_error((fp - fm) / (2 * step), np.sum(grads[name] * v))
    finally:
        release_routing(network)
    return errors
