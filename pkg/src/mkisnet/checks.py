"""Finite-difference gradient checks for every primitive and the composed network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import ModelConfig, build_model

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self):
        return bool(self.max_rel_error < TOLERANCE)


def _t(rng, *shape):
    return T.Tensor(rng.standard_normal(shape), dtype=np.float64)


def _away_from_zero(rng, *shape, margin=0.05):
    # keeps finite differences off the ReLU kink
    a = rng.standard_normal(shape)
    a = np.where(np.abs(a) < margin, np.sign(a + 1e-300) * margin + a, a)
    return T.Tensor(a, dtype=np.float64)


def check_conv2d(rng, size):
    x, k = _t(rng, 2, 3, size, size), _t(rng, 4, 3, 3, 3)
    probe = rng.standard_normal((2, 4, (size + 2 - 3) // 2 + 1, (size + 2 - 3) // 2 + 1))
    return T.grad_check(lambda: T.dot(T.conv2d(x, k, stride=2, padding=1), probe), [x, k])


def check_conv2d_bias(rng, size):
    x, k, b = _t(rng, 1, 2, size, size), _t(rng, 3, 2, 1, 1), _t(rng, 3)
    probe = rng.standard_normal((1, 3, size, size))
    return T.grad_check(lambda: T.dot(T.conv2d(x, k, bias=b), probe), [x, k, b])


def check_conv_transpose2d(rng, size):
    h = max(2, size // 2)
    x, k = _t(rng, 2, 3, h, h), _t(rng, 3, 2, 4, 4)
    probe = rng.standard_normal((2, 2, 2 * h, 2 * h))
    return T.grad_check(lambda: T.dot(T.conv_transpose2d(x, k, stride=2, padding=1), probe), [x, k])


def check_batch_norm_train(rng, size):
    x, g, b = _t(rng, 2, 2, 3, 3), _t(rng, 2), _t(rng, 2)
    probe = rng.standard_normal((2, 2, 3, 3))
    stats = T.RunningStats.fresh(2, np.float64)
    return T.grad_check(lambda: T.dot(T.batch_norm(x, g, b, stats, mode="train"), probe), [x, g, b])


def check_batch_norm_infer(rng, size):
    x, g, b = _t(rng, 2, 3, size, size), _t(rng, 3), _t(rng, 3)
    stats = T.RunningStats(rng.standard_normal(3), rng.uniform(0.5, 2.0, 3))
    probe = rng.standard_normal((2, 3, size, size))
    return T.grad_check(lambda: T.dot(T.batch_norm(x, g, b, stats, mode="infer"), probe), [x, g, b])


def check_relu(rng, size):
    x = _away_from_zero(rng, 2, 3, size, size)
    probe = rng.standard_normal(x.shape)
    return T.grad_check(lambda: T.dot(T.relu(x), probe), [x])


def check_dropout(rng, size):
    x = _t(rng, 2, 3, size, size)
    mask = T.dropout_mask(x.shape, 0.4, 7, np.float64)
    probe = rng.standard_normal(x.shape)
    return T.grad_check(lambda: T.dot(T.dropout(x, 0.4, "train", mask=mask), probe), [x])


def check_softmax(rng, size):
    x = _t(rng, 2, 3, size, size)
    probe = rng.standard_normal(x.shape)
    return T.grad_check(lambda: T.dot(T.softmax_channels(x), probe), [x])


def check_add(rng, size):
    a, b = _t(rng, 1, 2, size, size), _t(rng, 1, 2, size, size)
    probe = rng.standard_normal(a.shape)
    return T.grad_check(lambda: T.dot(T.add(a, b), probe), [a, b])


def check_weighted_cross_entropy(rng, size):
    logits = rng.standard_normal((2, 2, size, size))
    p = T.Tensor(np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True), dtype=np.float64)
    y = rng.integers(0, 2, (2, size, size))
    mask = rng.random((2, size, size)) > 0.2
    return T.grad_check(lambda: T.weighted_cross_entropy(p, y, (0.5556, 5.0), mask), [p])


def check_softmax_cross_entropy(rng, size):
    z = _t(rng, 2, 2, size, size)
    y = rng.integers(0, 2, (2, size, size))
    mask = rng.random((2, size, size)) > 0.2
    return T.grad_check(lambda: T.softmax_cross_entropy(z, y, (0.5556, 5.0), mask), [z])


def check_composite(rng, size):
    """conv2d -> softmax -> weighted cross-entropy on a 1x3x8x8 input."""
    x, k = _t(rng, 1, 3, 8, 8), _t(rng, 2, 3, 3, 3)
    y = rng.integers(0, 2, (1, 8, 8))
    fn = lambda: T.weighted_cross_entropy(T.softmax_channels(T.conv2d(x, k, padding=1)), y, (0.5556, 5.0))
    return T.grad_check(fn, [x, k])


def relu_margin(fn):
    """Smallest |input| over every ReLU evaluated by ``fn``."""
    tape = T.Tape()
    with T.use_tape(tape):
        fn()
    margins = [np.abs(n.inputs[0].data).min() for n in tape.nodes if n.op == "relu"]
    return float(min(margins)) if margins else np.inf


def check_network(rng, size, coords=6, margin=1e-4, epsilon=1e-5, attempts=100):
    """Full default network at 1x3x16x16 with a frozen dropout mask.

    Checks every input pixel plus ``coords`` random coordinates of each
    parameter tensor. Base points with a ReLU input closer than ``margin`` to
    the kink are redrawn, since finite differences across a kink are not a
    gradient.
    """
    for _ in range(attempts):
        model = build_model(ModelConfig(), rng_seed=int(rng.integers(1 << 31)), dtype=np.float64)
        x = T.Tensor(rng.random((1, 3, 16, 16)), dtype=np.float64)
        y = (rng.random((1, 16, 16)) < 0.2).astype(np.int64)
        mask = T.dropout_mask((1, model.config.width, 4, 4), model.config.dropout_p,
                              int(rng.integers(1 << 31)), np.float64)
        fn = lambda: T.softmax_cross_entropy(
            model.forward_logits(x, mode="train", dropout_mask=mask), y, (0.625, 2.5)
        )
        if relu_margin(fn) >= margin:
            break
    else:
        raise RuntimeError(f"no base point with ReLU margin {margin} in {attempts} draws")
    worst = T.grad_check(fn, [x], epsilon=epsilon)
    worst = max(worst, T.grad_check(fn, list(model.parameters.values()), epsilon=epsilon, coords=coords,
                                    rng_seed=int(rng.integers(1 << 31))))
    return worst


CHECKS = {
    "conv2d": check_conv2d,
    "conv2d_bias": check_conv2d_bias,
    "conv_transpose2d": check_conv_transpose2d,
    "batch_norm_train": check_batch_norm_train,
    "batch_norm_infer": check_batch_norm_infer,
    "relu": check_relu,
    "dropout": check_dropout,
    "softmax_channels": check_softmax,
    "elementwise_add": check_add,
    "weighted_cross_entropy": check_weighted_cross_entropy,
    "softmax_cross_entropy": check_softmax_cross_entropy,
    "conv_softmax_wce": check_composite,
    "network": check_network,
}


def run_all(size=6, seed=0, names=None):
    out = []
    for name, fn in CHECKS.items():
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, list(CHECKS).index(name)])
        out.append(CheckResult(name, float(fn(rng, size))))
    return out
