"""Central finite-difference verification of analytic gradients.

The numerical side only ever evaluates forward passes, so it stays
independent of the backward implementations it is used to check.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x``.

    ``f`` must treat its argument as read-only; the same buffer is perturbed
    one entry at a time and restored.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1.0) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor).

    The floor makes the measure absolute for small gradients, where plain
    relative error would amplify finite-difference roundoff.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    h: float = 1e-6,
    floor: float = 1.0,
) -> float:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` maps one Tensor per input array to a scalar Tensor. Returns the
    worst relative error over all inputs.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    out.backward()

    worst = 0.0
    for k, leaf in enumerate(leaves):
        def forward_only(x: np.ndarray, k: int = k) -> float:
            args = [Tensor(a.copy()) for a in arrays]
            args[k] = Tensor(x.copy())
            return float(fn(*args).data)

        numeric = numerical_gradient(forward_only, arrays[k], h=h)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[k])
        worst = max(worst, relative_error(analytic, numeric, floor=floor))
    return worst


def op_cases(seed: int) -> dict:
    """One scalar-valued probe per differentiable op: name -> (fn, input arrays)."""
    from . import tensor as T

    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4)) + np.sign(rng.normal(size=(3, 4))) * 0.5
    row = rng.normal(size=(1, 4))
    m1 = rng.normal(size=(2, 3, 4))
    m2 = rng.normal(size=(4, 2))
    img = rng.normal(size=(2, 2, 4, 4))
    k2 = rng.normal(size=(3, 2, 3, 3)) * 0.5
    sig = rng.normal(size=(2, 2, 6))
    k1 = rng.normal(size=(3, 2, 3)) * 0.5
    # keep relu/maxpool inputs away from kinks and ties
    relu_in = rng.normal(size=(3, 3))
    relu_in = relu_in + np.sign(relu_in) * 0.1
    pool_in = rng.permutation(np.linspace(-1.0, 1.0, 32)).reshape(1, 2, 4, 4)
    return {
        "add_broadcast": (lambda x, y: (x + y).sum(), [a, row]),
        "mul": (lambda x, y: (x * y * 0.5).sum(), [a, b]),
        "div": (lambda x, y: (x / y).sum(), [a, b]),
        "sub": (lambda x, y: (x - y).sum(), [a, b]),
        "power": (lambda x: (x ** 3).sum(), [a]),
        "exp": (lambda x: T.exp(x).sum(), [a * 0.3]),
        "log": (lambda x: T.log(x).sum(), [np.abs(a) + 0.5]),
        "sqrt": (lambda x: T.sqrt(x).sum(), [np.abs(a) + 0.5]),
        "relu": (lambda x: (T.relu(x) * T.relu(x)).sum(), [relu_in]),
        "clip": (lambda x: (T.clip(x, -0.5, 0.5) * 2.0).sum(), [a]),
        "matmul_batched": (lambda x, y: (x @ y).sum(), [m1, m2]),
        "sum_axis": (lambda x: (x.sum(axis=0) ** 2).sum(), [a]),
        "mean_axes": (lambda x: (x.mean(axis=(0, 1)) ** 2).sum(), [m1]),
        "reshape": (lambda x: (x.reshape(12) ** 2).sum(), [a]),
        "getitem": (lambda x: (x[1:, ::2] ** 2).sum(), [a]),
        "stack": (lambda x, y: (T.stack([x, y], axis=1) ** 2).sum(), [a, b]),
        "concat": (lambda x, y: (T.concat([x, y], axis=0) ** 2).sum(), [a, b]),
        "softmax": (lambda x: (T.softmax(x, axis=-1) ** 2).sum(), [a]),
        "squash": (lambda x: (T.squash(x, axis=-1) ** 2).sum(), [a]),
        "conv2d": (
            lambda x, w, c: (T.conv2d(x, w, c, stride=1, padding=1) ** 2).sum(),
            [img, k2, rng.normal(size=3)],
        ),
        "conv2d_strided": (
            lambda x, w, c: (T.conv2d(x, w, c, stride=2, padding=0) ** 2).sum(),
            [img, k2, rng.normal(size=3)],
        ),
        "conv1d": (
            lambda x, w, c: (T.conv1d(x, w, c, stride=2) ** 2).sum(),
            [sig, k1, rng.normal(size=3)],
        ),
        "maxpool2d": (lambda x: (T.maxpool2d(x, 2) ** 2).sum(), [pool_in]),
        "batchnorm_train": (
            lambda x, g, c: T.batchnorm(x, g, c, np.zeros(2), np.ones(2), training=True).sum()
            + (T.batchnorm(x, g, c, np.zeros(2), np.ones(2), training=True) ** 2).sum(),
            [img, rng.normal(size=2) + 2.0, rng.normal(size=2)],
        ),
        "batchnorm_eval": (
            lambda x, g, c: (T.batchnorm(x, g, c, np.full(2, 0.3), np.full(2, 1.7), training=False) ** 2).sum(),
            [img, rng.normal(size=2) + 2.0, rng.normal(size=2)],
        ),
    }


def end_to_end_error(seed: int = 7, h: float = 1e-6) -> float:
    """Finite-difference check of the full loss gradient on a tiny model.

    Toy extractor, batch of two, 64-bit, noise off (finite differences need
    a deterministic forward). The frozen extractor runs once; its output is
    constant with respect to every checked parameter.
    """
    from .capsnet import CapsuleHeadSpec, CapsuleModel, RoutingConfig, loss
    from .extractor import ToyExtractor

    rng = np.random.default_rng(seed)
    extractor = ToyExtractor(channels=4, rng=rng, dtype=np.float64)
    model = CapsuleModel(
        extractor,
        routing=RoutingConfig(iterations=2, noise_sigma=0.0),
        head=CapsuleHeadSpec(conv_channels=(3, 11), pooled_channels=4),
        rng=rng,
        dtype=np.float64,
    )
    images = Tensor(rng.normal(size=(2, 3, 128, 128)))
    features = model.extractor.extract(images).data
    labels = np.array([0.0, 1.0])

    def objective() -> float:
        pred = model.forward(Tensor(features), train=True)
        return float(loss(labels, pred.y_hat).mean().data)

    params = model.trainable_parameters()
    for _, p in params:
        p.zero_grad()
    pred = model.forward(Tensor(features), train=True)
    loss(labels, pred.y_hat).mean().backward()

    worst = 0.0
    for _, p in params:
        def f(x, p=p):
            saved = p.data
            p.data = x
            try:
                return objective()
            finally:
                p.data = saved

        numeric = numerical_gradient(f, p.data.copy(), h=h)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def run_gradcheck_suite(seed: int = 7) -> dict:
    """Per-op relative errors plus the tiny end-to-end loss check."""
    results = {name: check_gradients(fn, arrays)
               for name, (fn, arrays) in op_cases(seed).items()}
    results["full_loss"] = end_to_end_error(seed)
    return results
