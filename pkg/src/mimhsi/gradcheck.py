"""Finite-difference verification suites for the primitives, the selective
scan, and the full tiny model. Shared by the test suite and the `gradcheck`
CLI command; pass corrupt=True to inject a deliberately wrong backward as a
negative control (the suite must then fail)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ssm import init_ssm_params, selective_scan_sequential

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3
FD_STEP = 1e-5


@dataclass
class CheckResult:
    suite: str
    op: str
    max_rel_err: float
    threshold: float

    @property
    def passed(self):
        return self.max_rel_err < self.threshold


def _weighted_scalar(out, w):
    return ad.sum_(ad.mul(out, Tensor(w)))


def _check_args(op_fn, arrays, rng, n_out_shape_probe=True):
    """Compare grad() against finite differences for every argument of op_fn."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    probe = op_fn(*tensors)
    w = rng.normal(size=probe.shape)
    ad.clear_tape()

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = _weighted_scalar(op_fn(*tensors), w)
    analytic = ad.grad(loss, tensors)

    worst = 0.0
    for pos in range(len(arrays)):
        def f(x, pos=pos):
            args = [Tensor(a) for a in arrays]
            args[pos] = x
            return _weighted_scalar(op_fn(*args), w)

        fd = ad.finite_diff_grad(f, Tensor(arrays[pos]), FD_STEP)
        worst = max(worst, ad.rel_error(analytic[pos], fd))
    return worst


def _corrupted_silu(x):
    # negative control: forward is silu, backward derivative is scaled wrong
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * s

    def backward(g):
        return [1.1 * g * (s + x.data * s * (1.0 - s))]

    return ad.record("corrupted_silu", out, (x,), backward)


def _primitive_cases(rng):
    n = lambda *shape: rng.normal(size=shape)
    pos = lambda *shape: np.abs(rng.normal(size=shape)) + 0.5
    cases = [
        ("add", lambda a, b: ad.add(a, b), lambda: (n(3, 4), n(3, 4))),
        ("add_broadcast", lambda a, b: ad.add(a, b), lambda: (n(2, 3, 4), n(4))),
        ("sub", lambda a, b: ad.sub(a, b), lambda: (n(3, 4), n(1, 4))),
        ("mul", lambda a, b: ad.mul(a, b), lambda: (n(3, 4), n(3, 1))),
        ("div", lambda a, b: ad.div(a, b), lambda: (n(3, 4), pos(3, 4))),
        ("neg", ad.neg, lambda: (n(2, 5),)),
        ("power", lambda a: ad.power(a, 2.0), lambda: (n(3, 4),)),
        ("power_inv_sqrt", lambda a: ad.power(a, -0.5), lambda: (pos(3, 4),)),
        ("matmul", ad.matmul, lambda: (n(3, 4), n(4, 2))),
        ("matmul_batched", ad.matmul, lambda: (n(2, 3, 4), n(4, 2))),
        ("sigmoid", ad.sigmoid, lambda: (n(3, 4),)),
        ("tanh", ad.tanh, lambda: (n(3, 4),)),
        ("exp", ad.exp, lambda: (n(3, 4),)),
        ("silu", ad.silu, lambda: (n(3, 4),)),
        ("softplus", ad.softplus, lambda: (n(3, 4),)),
        ("expm1_over_x", ad.expm1_over_x, lambda: (n(3, 4),)),
        ("expm1_over_x_small", ad.expm1_over_x, lambda: (n(3, 4) * 1e-7,)),
        ("sum", lambda a: ad.sum_(a, axis=1), lambda: (n(3, 4),)),
        ("sum_all", lambda a: ad.sum_(a), lambda: (n(3, 4),)),
        ("mean", lambda a: ad.mean(a, axis=(0, 2), keepdims=True), lambda: (n(2, 3, 4),)),
        ("max", lambda a: ad.max_(a, axis=-1), lambda: (n(3, 5),)),
        ("max_keepdims", lambda a: ad.max_(a, axis=1, keepdims=True), lambda: (n(3, 5),)),
        ("softmax", lambda a: ad.softmax(a, axis=-1), lambda: (n(3, 5),)),
        ("softmax_axis0", lambda a: ad.softmax(a, axis=0), lambda: (n(3, 5),)),
        ("reshape", lambda a: ad.reshape(a, (4, 3)), lambda: (n(3, 4),)),
        ("swapaxes", lambda a: ad.swapaxes(a, -1, -2), lambda: (n(2, 3, 4),)),
        ("reverse", lambda a: ad.reverse(a, axis=1), lambda: (n(3, 4),)),
        ("concatenate", lambda a, b: ad.concatenate([a, b], axis=1), lambda: (n(3, 2), n(3, 4))),
        ("slice", lambda a: a[:, 1:3, :], lambda: (n(2, 4, 3),)),
        ("index_select", lambda a: ad.index_select(a, 1, [0, 2, 2, 1]), lambda: (n(2, 4, 3),)),
        ("conv1d_causal", ad.conv1d_depthwise_causal, lambda: (n(2, 6, 3), n(4, 3))),
        ("adaptive_avg_pool2d", lambda a: ad.adaptive_avg_pool2d(a, 3), lambda: (n(2, 5, 5, 3),)),
        ("cross_entropy", None, None),  # handled specially below
    ]
    return cases


def check_primitives(seed=0, n_trials=20, corrupt=False):
    """Every primitive against central finite differences on random inputs."""
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, sampler in _primitive_cases(rng):
        worst = 0.0
        for _ in range(n_trials):
            if name == "cross_entropy":
                logits = rng.normal(size=(4, 3))
                labels = rng.integers(0, 3, size=4)
                t = Tensor(logits, requires_grad=True)
                loss = ad.cross_entropy_with_softmax(t, labels)
                (g,) = ad.grad(loss, [t])
                fd = ad.finite_diff_grad(
                    lambda x: ad.cross_entropy_with_softmax(x, labels), Tensor(logits), FD_STEP
                )
                worst = max(worst, ad.rel_error(g, fd))
            else:
                worst = max(worst, _check_args(fn, sampler(), rng))
        results.append(CheckResult("primitives", name, worst, PRIMITIVE_TOL))
    if corrupt:
        worst = 0.0
        for _ in range(n_trials):
            worst = max(worst, _check_args(_corrupted_silu, (rng.normal(size=(3, 4)),), rng))
        results.append(CheckResult("primitives", "corrupted_silu(negative-control)", worst, PRIMITIVE_TOL))
    return results


def check_selective_scan(seed=0, n_trials=6):
    """Gradients of the S6 sequential scan w.r.t. x and every parameter."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(n_trials):
        d, n = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        length = int(rng.integers(2, 7))
        params = init_ssm_params(rng, d, n, k=3)
        x = rng.normal(size=(length, d))
        w = rng.normal(size=(length, d))

        tensors = [("x", Tensor(x, requires_grad=True))] + [
            (name, t) for name, t in params.named("p")
        ]

        def forward(xt):
            return _weighted_scalar(selective_scan_sequential(xt, params), w)

        loss = forward(tensors[0][1])
        analytic = ad.grad(loss, [t for _, t in tensors])
        for (name, tensor), g in zip(tensors, analytic):
            base = tensor.data.copy()

            def f(v, tensor=tensor):
                old = tensor.data
                tensor.data = v.data
                try:
                    xt = Tensor(tensors[0][1].data if tensor is not tensors[0][1] else v.data)
                    return forward(xt)
                finally:
                    tensor.data = old

            fd = ad.finite_diff_grad(f, Tensor(base), FD_STEP)
            worst = max(worst, ad.rel_error(g, fd))
    return [CheckResult("selective-scan", "x-and-params", worst, PRIMITIVE_TOL)]


def tiny_model_config():
    from .model import MimConfig

    return MimConfig(
        patch=3, bands=4, embed_dim=4, hidden_dim=4, n_classes=2,
        depth=1, state_dim=4, conv_width=2, scan_types=4,
    )


def check_full_model(seed=0, coords_per_tensor=4):
    """End-to-end gradient of the multi-scale loss on the tiny preset.

    Finite differences probe a seeded coordinate sample of every parameter
    tensor and of the input patch; the analytic gradient comes from one
    backward pass.
    """
    from .model import MimModel

    rng = np.random.default_rng(seed)
    model = MimModel(tiny_model_config(), seed=seed)
    patches = rng.normal(size=(2, 3, 3, 4))
    labels = np.array([0, 1])
    x = Tensor(patches, requires_grad=True)

    def forward():
        total, _, _ = model.loss(x, labels)
        return total

    loss = forward()
    named = [("input", x)] + model.named_parameters()
    analytic = ad.grad(loss, [t for _, t in named])

    worst = 0.0
    with ad.no_grad():
        for (name, tensor), g in zip(named, analytic):
            flat = tensor.data.reshape(-1)
            k = min(coords_per_tensor, flat.size)
            picks = rng.choice(flat.size, size=k, replace=False)
            for j in picks:
                old = flat[j]
                flat[j] = old + FD_STEP
                fp = forward().item()
                flat[j] = old - FD_STEP
                fm = forward().item()
                flat[j] = old
                fd = (fp - fm) / (2 * FD_STEP)
                worst = max(worst, ad.rel_error(np.array(g.data.reshape(-1)[j]), np.array(fd)))
    return [CheckResult("full-model", "tiny-preset", worst, MODEL_TOL)]


def run_all(seed=0, corrupt=False, n_trials=20):
    results = check_primitives(seed=seed, n_trials=n_trials, corrupt=corrupt)
    results += check_selective_scan(seed=seed, n_trials=max(2, n_trials // 3))
    results += check_full_model(seed=seed)
    return results
