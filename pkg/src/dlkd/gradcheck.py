"""Finite-difference checks of every differentiable op, run in float64.

Each check builds a scalar from an op's output (a fixed random projection, so
every output element matters), runs ``backward`` and compares each input's
gradient with ``finite_diff_grad``. Biases are drawn nonzero so no ReLU sits
exactly on its kink.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dlkd.losses import LossWeights, cross_entropy, kl_soft_targets, student_total_loss
from dlkd.model import ModelConfig, build_classifier, forward, r2plus1d_block
from dlkd.tensor import (
    Tensor,
    affine,
    avg_pool_global,
    backward,
    conv3d,
    finite_diff_grad,
    log_softmax,
    precision,
    relative_error,
    relu,
    softmax,
)

TOLERANCE = 1e-4
EPS = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    error: float
    tolerance: float = TOLERANCE

    @property
    def ok(self):
        return self.error <= self.tolerance


def _away_from_zero(rng, shape):
    return np.sign(rng.standard_normal(shape)) * rng.uniform(0.05, 1.0, size=shape)


def _projected(fn, rng, out_shape):
    weights = rng.standard_normal(out_shape)
    return lambda *args: (fn(*args) * weights).sum()


def _compare(loss_fn, inputs):
    """Worst relative error over all inputs of ``loss_fn(*inputs)``."""
    tensors = [Tensor(x, requires_grad=True, dtype=np.float64) for x in inputs]
    backward(loss_fn(*tensors), params=tensors)
    worst = 0.0
    for i, tensor in enumerate(tensors):
        def f(probe, i=i):
            args = [Tensor(x, dtype=np.float64) for x in inputs]
            args[i] = probe
            return loss_fn(*args)

        worst = max(worst, relative_error(tensor.grad, finite_diff_grad(f, inputs[i], EPS)))
    return worst


def _conv3d(rng):
    x = rng.standard_normal((3, 2, 4, 4))
    k = rng.standard_normal((2, 3, 2, 3, 3))
    b = rng.standard_normal(2)
    stride = tuple(rng.integers(1, 3, size=3))
    padding = tuple(rng.integers(0, 2, size=3))
    out = conv3d(Tensor(x), Tensor(k), Tensor(b), stride, padding).shape
    fn = _projected(lambda x, k, b: conv3d(x, k, b, stride, padding), rng, out)
    return _compare(fn, [x, k, b])


def _conv3d_sum(rng):
    x = rng.standard_normal((3, 2, 4, 4))
    k = rng.standard_normal((2, 3, 1, 3, 3))
    return _compare(lambda x, k: conv3d(x, k).sum(), [x, k])


def _relu(rng):
    x = _away_from_zero(rng, (4, 5))
    return _compare(_projected(relu, rng, x.shape), [x])


def _avg_pool(rng):
    x = rng.standard_normal((2, 3, 2, 3, 3))
    return _compare(_projected(avg_pool_global, rng, (2, 3)), [x])


def _affine(rng):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((5, 4))
    b = rng.standard_normal(5)
    return _compare(_projected(affine, rng, (3, 5)), [x, w, b])


def _softmax(rng):
    temperature = rng.uniform(0.5, 3.0)
    x = rng.standard_normal((2, 6)) * 3
    return _compare(_projected(lambda z: softmax(z, temperature), rng, x.shape), [x])


def _log_softmax(rng):
    temperature = rng.uniform(0.5, 3.0)
    x = rng.standard_normal((2, 6)) * 3
    return _compare(_projected(lambda z: log_softmax(z, temperature), rng, x.shape), [x])


def _cross_entropy(rng):
    x = rng.standard_normal((4, 5)) * 2
    labels = rng.integers(0, 5, size=4)
    return _compare(lambda z: cross_entropy(z, labels), [x])


def _kl(rng):
    teacher = rng.standard_normal((4, 5)) * 2
    student = rng.standard_normal((4, 5)) * 2
    temperature = rng.uniform(0.5, 3.0)
    return _compare(lambda z: kl_soft_targets(teacher, z, temperature), [student])


def _student_total(rng):
    teacher = rng.standard_normal((3, 4))
    labels = rng.integers(0, 4, size=3)
    weights = LossWeights(rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0))

    def fn(z):
        return student_total_loss(cross_entropy(z, labels), kl_soft_targets(teacher, z), weights)

    return _compare(fn, [rng.standard_normal((3, 4))])


def _block(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    sw = rng.standard_normal((3, 2, 1, 3, 3))
    sb = rng.standard_normal(3)
    tw = rng.standard_normal((3, 3, 3, 1, 1))
    tb = rng.standard_normal(3)
    fn = _projected(lambda *p: r2plus1d_block(p[0], p[1:]), rng, (3, 3, 2, 2))
    return _compare(fn, [x, sw, sb, tw, tb])


def _classifier(rng):
    """Two-block classifier + alpha*CE + beta*KL, gradients w.r.t. every parameter."""
    config = ModelConfig(num_classes=3, input_shape=(2, 4, 8, 8), widths=(2, 3),
                         seed=int(rng.integers(2**31)))
    with precision(np.float64):
        model = build_classifier(config)
    for name, p in model.params.items():
        if name.endswith("bias"):
            p.data[...] = rng.uniform(0.05, 0.3, size=p.shape)
    clips = rng.uniform(0, 1, size=(2, 2, 4, 8, 8))
    labels = rng.integers(0, 3, size=2)
    teacher = rng.standard_normal((2, 3))
    weights = LossWeights(1.0, 1.0)
    names = list(model.params)
    inputs = [model.params[n].data.copy() for n in names]

    def loss(*params):
        model.params = dict(zip(names, params))
        logits = forward(model, Tensor(clips, dtype=np.float64))
        return student_total_loss(cross_entropy(logits, labels), kl_soft_targets(teacher, logits), weights)

    return _compare(loss, inputs)


CHECKS = {
    "conv3d": _conv3d,
    "conv3d_sum": _conv3d_sum,
    "relu": _relu,
    "avg_pool_global": _avg_pool,
    "affine": _affine,
    "softmax": _softmax,
    "log_softmax": _log_softmax,
    "cross_entropy": _cross_entropy,
    "kl_soft_targets": _kl,
    "student_total_loss": _student_total,
    "r2plus1d_block": _block,
    "classifier_total_loss": _classifier,
}


def run_check(name, seed):
    rng = np.random.default_rng([seed, list(CHECKS).index(name)])
    return CheckResult(name, seed, CHECKS[name](rng))


def run_suite(seeds=range(10), names=None):
    return [run_check(name, seed) for name in (names or CHECKS) for seed in seeds]
