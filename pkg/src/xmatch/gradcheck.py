"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError
from .tensor import Tensor


def grad_check(
    f: Callable[[], Tensor],
    params: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` recomputes a scalar from the current values of ``params`` (which
    are perturbed in place). The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``. With ``max_coords`` only a
    random subset of coordinates per tensor is probed.
    """
    if isinstance(params, Tensor):
        params = [params]
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, size=max_coords, replace=False)
        gflat = ga.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            if not (np.isfinite(num) and np.isfinite(gflat[i])):
                raise NumericalError(f"non-finite gradient estimate at coordinate {i} of {p.name or p.shape}")
            err = abs(gflat[i] - num) / max(1.0, abs(num))
            worst = max(worst, float(err))
    return worst


def _nudged(rng: np.random.Generator, shape, scale=1.0) -> np.ndarray:
    """Random float64 values kept away from ReLU kinks at zero."""
    x = rng.standard_normal(shape) * scale
    return np.where(np.abs(x) < 0.05, np.sign(x + 1e-12) * 0.05 + x, x)


def run_suite(seed: int = 0, h: float = 1e-5, max_coords: int = 40) -> dict[str, float]:
    """Max relative gradient error for every differentiable component, at 64-bit."""
    from . import ops
    from . import tensor as T
    from .dualpath import CrossModalNet, GatedBlock, ModelConfig, gate_apply
    from .losses import cmpc_loss, cmpm_loss, total_loss

    rng = np.random.default_rng(seed)
    f64 = np.float64
    results: dict[str, float] = {}

    def check(name, f, params):
        results[name] = grad_check(f, params, h=h, max_coords=max_coords, rng=rng)

    a = Tensor(_nudged(rng, (4, 5)), dtype=f64)
    b = Tensor(_nudged(rng, (5, 3)), dtype=f64)
    c = Tensor(_nudged(rng, (4, 5)), dtype=f64)
    pos = Tensor(rng.uniform(0.5, 2.0, (4, 5)), dtype=f64)
    w = Tensor(rng.standard_normal((4, 3)), dtype=f64)
    w5 = Tensor(rng.standard_normal((4, 5)), dtype=f64)

    check("matmul", lambda: ((a @ b) * w).sum(), [a, b])
    check("add/mul", lambda: ((a + c) * (a * c) * w5).sum(), [a, c])
    check("relu", lambda: (T.relu(a) * w5).sum(), [a])
    check("sigmoid", lambda: (T.sigmoid(a) * w5).sum(), [a])
    check("exp", lambda: (T.exp(a) * w5).sum(), [a])
    check("log", lambda: (T.log(pos) * w5).sum(), [pos])
    check("softmax", lambda: (T.softmax(a, axis=1) * w5).sum(), [a])
    check("log_softmax", lambda: (T.log_softmax(a, axis=1) * w5).sum(), [a])
    check("l2_normalize", lambda: (T.l2_normalize(a, axis=1) * w5).sum(), [a])
    check("reshape/concat", lambda: (T.reshape(T.concat([a, c], axis=1), (4, 10)) * T.concat([w5, w5], axis=1)).sum(), [a, c])

    x = Tensor(_nudged(rng, (2, 6, 5, 3)), dtype=f64)
    k = Tensor(_nudged(rng, (3, 3, 3, 4), 0.5), dtype=f64)
    k13 = Tensor(_nudged(rng, (1, 3, 3, 4), 0.5), dtype=f64)
    wo = rng.standard_normal((2, 3, 3, 4))
    check("conv2d", lambda: (ops.conv2d(x, k, (2, 2), (1, 1)) * Tensor(wo)).sum(), [x, k])
    check("conv2d_1x3", lambda: (ops.conv2d(x, k13, (1, 2), (0, 1)) * Tensor(rng_fixed(seed, (2, 6, 3, 4)))).sum(), [x, k13])
    check("max_pool2d", lambda: (ops.max_pool2d(x) * Tensor(rng_fixed(seed, (2, 3, 3, 3)))).sum(), [x])
    check("global_max_pool", lambda: (ops.global_max_pool(x) * Tensor(rng_fixed(seed, (2, 3)))).sum(), [x])
    check("global_avg_pool", lambda: (ops.global_avg_pool(x) * Tensor(rng_fixed(seed, (2, 3)))).sum(), [x])
    gamma = Tensor(rng.uniform(0.5, 1.5, 3), dtype=f64)
    beta = Tensor(rng.standard_normal(3), dtype=f64)
    check(
        "batch_norm",
        lambda: (ops.batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), True) * Tensor(rng_fixed(seed, (2, 6, 5, 3)))).sum(),
        [x, gamma, beta],
    )

    gb = GatedBlock(16, 4, rng).astype(f64)
    f = Tensor(_nudged(rng, (3, 16)), dtype=f64)
    check("gate_apply", lambda: (gate_apply(f, gb) * Tensor(rng_fixed(seed, (3, 16)))).sum(), [f, gb.w1, gb.w2])

    n, d, m = 6, 8, 4
    labels = np.array([0, 1, 1, 2, 3, 0])
    v = Tensor(rng.standard_normal((n, d)), dtype=f64)
    t = Tensor(rng.standard_normal((n, d)), dtype=f64)
    wc = Tensor(rng.standard_normal((d, m)), dtype=f64)
    check("cmpm_loss", lambda: cmpm_loss(v, t, labels), [v, t])
    check("cmpc_loss", lambda: cmpc_loss(v, t, wc, labels), [v, t, wc])

    cfg = ModelConfig(cf=16, r=4, embed_dim=6, num_classes=m, pool="gmp", gb=True, batch_norm=True)
    model = CrossModalNet(cfg, np.random.default_rng(seed)).astype(f64)
    imgs = Tensor(rng.standard_normal((n, 64, 32, 3)), dtype=f64)
    emb = Tensor(rng.standard_normal((n, 1, 8, 6)), dtype=f64)

    def composite():
        return total_loss(model.encode_image(imgs), model.encode_text(emb), model.classifier, labels)

    check("dual_path_composite", composite, model.parameters())
    return results


def rng_fixed(seed: int, shape) -> np.ndarray:
    """Deterministic projection weights so repeated closures see the same objective."""
    return np.random.default_rng([seed, *shape]).standard_normal(shape)
