"""Shared test utilities: finite-difference gradient checking and the table
of differentiable-op cases used by both the unit tests and the acceptance
suite."""

import numpy as np

from sia3d import ndtensor as nd
from sia3d.ndtensor import Tensor


def fd_gradcheck(make_loss, params, h=1e-5, sample=None, rng=None):
    """Max relative error between backward() grads and central differences.

    make_loss rebuilds the loss from the current parameter values; params are
    float64 tensors.  sample limits the number of coordinates checked per
    parameter (all by default).
    """
    for p in params:
        p.grad = None
    loss = make_loss()
    nd.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    worst = 0.0
    for pi, p in enumerate(params):
        n = p.data.size
        if sample is not None and n > sample:
            idxs = rng.choice(n, size=sample, replace=False)
        else:
            idxs = range(n)
        flat = p.data.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f1 = float(make_loss().data)
            flat[i] = orig - h
            f2 = float(make_loss().data)
            flat[i] = orig
            num = (f1 - f2) / (2.0 * h)
            a = float(analytic[pi].reshape(-1)[i])
            rel = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, rel)
    return worst


def _t(rng, shape, lo=-1.0, hi=1.0, away_from=None, min_gap=0.05):
    """Random float64 tensor, optionally bounded away from a kink value."""
    x = rng.uniform(lo, hi, size=shape)
    if away_from is not None:
        sign = np.where(x >= away_from, 1.0, -1.0)
        x = x + sign * min_gap
    return Tensor(x, requires_grad=True)


def _make_weighted(rng):
    """Scalarizer with weights frozen at first use, so repeated make_loss()
    calls evaluate the same function (required for finite differences)."""
    cache = {}

    def weighted(y):
        if y.shape not in cache:
            cache[y.shape] = Tensor(rng.uniform(-1.0, 1.0, size=y.shape))
        return nd.sum_(nd.mul(y, cache[y.shape]))

    return weighted


def op_cases(rng):
    """One randomized gradcheck case per differentiable op.

    Returns a list of (op name, params list, make_loss closure).
    """
    cases = []

    def add_case(name, params, fn):
        cases.append((name, params, fn))

    a = _t(rng, (3, 4))
    b = _t(rng, (3, 4))
    w = _make_weighted(rng)
    add_case("add", [a, b], lambda a=a, b=b, w=w: w(nd.add(a, b)))

    a = _t(rng, (2, 3, 4))
    b = _t(rng, (4,))
    w = _make_weighted(rng)
    add_case("add_broadcast", [a, b], lambda a=a, b=b, w=w: w(nd.add(a, b)))

    a = _t(rng, (3, 4))
    b = _t(rng, (3, 4))
    w = _make_weighted(rng)
    add_case("sub", [a, b], lambda a=a, b=b, w=w: w(nd.sub(a, b)))

    a = _t(rng, (3, 4))
    b = _t(rng, (3, 4))
    w = _make_weighted(rng)
    add_case("mul", [a, b], lambda a=a, b=b, w=w: w(nd.mul(a, b)))

    a = _t(rng, (3, 4))
    b = _t(rng, (3, 4), lo=0.5, hi=2.0)
    w = _make_weighted(rng)
    add_case("div", [a, b], lambda a=a, b=b, w=w: w(nd.div(a, b)))

    a = _t(rng, (3, 4))
    b = _t(rng, (4, 5))
    w = _make_weighted(rng)
    add_case("matmul", [a, b], lambda a=a, b=b, w=w: w(nd.matmul(a, b)))

    a = _t(rng, (2, 3, 4))
    b = _t(rng, (2, 4, 5))
    w = _make_weighted(rng)
    add_case("matmul_batched", [a, b], lambda a=a, b=b, w=w: w(nd.matmul(a, b)))

    x = _t(rng, (2, 3, 4))
    w = _make_weighted(rng)
    add_case("transpose", [x], lambda x=x, w=w: w(nd.transpose(x, (2, 0, 1))))

    x = _t(rng, (2, 6))
    w = _make_weighted(rng)
    add_case("reshape", [x], lambda x=x, w=w: w(nd.reshape(x, (3, 4))))

    x = _t(rng, (2, 3))
    y = _t(rng, (2, 2))
    w = _make_weighted(rng)
    add_case("concat", [x, y], lambda x=x, y=y, w=w: w(nd.concat([x, y], axis=1)))

    x = _t(rng, (5, 4))
    w = _make_weighted(rng)
    add_case("slice", [x], lambda x=x, w=w: w(x[1:4, ::2]))

    x = _t(rng, (6, 4))
    idx = rng.integers(0, 6, size=(2, 5))
    w = _make_weighted(rng)
    add_case("gather", [x], lambda x=x, idx=idx, w=w: w(nd.gather(x, idx, axis=0)))

    table = _t(rng, (7, 3))
    ids = rng.integers(0, 7, size=(4,))
    w = _make_weighted(rng)
    add_case("embedding_lookup", [table],
             lambda t=table, i=ids, w=w: w(nd.embedding_lookup(t, i)))

    x = _t(rng, (3, 5), lo=-2.0, hi=2.0)
    w = _make_weighted(rng)
    add_case("softmax", [x], lambda x=x, w=w: w(nd.softmax(x, axis=-1)))

    x = _t(rng, (3, 5), lo=-2.0, hi=2.0)
    w = _make_weighted(rng)
    add_case("log_softmax", [x], lambda x=x, w=w: w(nd.log_softmax(x, axis=-1)))

    x = _t(rng, (4, 6))
    g = _t(rng, (6,), lo=0.5, hi=1.5)
    bta = _t(rng, (6,))
    w = _make_weighted(rng)
    add_case("layer_norm", [x, g, bta],
             lambda x=x, g=g, b=bta, w=w: w(nd.layer_norm(x, g, b)))

    x = _t(rng, (3, 5), away_from=0.0)
    w = _make_weighted(rng)
    add_case("relu", [x], lambda x=x, w=w: w(nd.relu(x)))

    x = _t(rng, (3, 5), lo=-2.0, hi=2.0)
    w = _make_weighted(rng)
    add_case("gelu", [x], lambda x=x, w=w: w(nd.gelu(x)))

    x = _t(rng, (3, 5), lo=-2.0, hi=2.0)
    w = _make_weighted(rng)
    add_case("softplus", [x], lambda x=x, w=w: w(nd.softplus(x)))

    x = _t(rng, (3, 4), lo=0.3, hi=2.0)
    p = Tensor(np.asarray([rng.uniform(0.5, 3.0)]), requires_grad=True)
    w = _make_weighted(rng)
    add_case("pow", [x, p], lambda x=x, p=p, w=w: w(nd.pow_(x, p)))

    x = _t(rng, (3, 4))
    add_case("sum", [x], lambda x=x: nd.sum_(x))

    x = _t(rng, (3, 4, 2))
    w = _make_weighted(rng)
    add_case("mean_over_set", [x], lambda x=x, w=w: w(nd.mean_over_set(x, axis=1)))

    base = rng.uniform(-1.0, 1.0, size=(3, 5, 2))
    base += np.linspace(0, 0.4, 5)[None, :, None] * np.sign(base + 1e-9)  # break ties
    x = Tensor(base, requires_grad=True)
    w = _make_weighted(rng)
    add_case("max_over_set", [x], lambda x=x, w=w: w(nd.max_over_set(x, axis=1)))

    x = _t(rng, (3, 4), away_from=0.0)
    add_case("l1_norm", [x], lambda x=x: nd.l1_norm(x))

    x = _t(rng, (3, 4), lo=0.3, hi=1.5)
    w = _make_weighted(rng)
    add_case("l2_normalize", [x], lambda x=x, w=w: w(nd.l2_normalize(x, axis=-1)))

    logits = _t(rng, (5, 7), lo=-2.0, hi=2.0)
    targets = rng.integers(0, 7, size=(5,))
    add_case("cross_entropy_with_logits", [logits],
             lambda l=logits, t=targets: nd.sum_(nd.cross_entropy_with_logits(l, t)))

    return cases


def tiny_scene(seed=7, n_objects=3, n_points=1024):
    from sia3d.scenegen import generate_scene
    return generate_scene(seed, n_objects, n_points)


def tiny_config(**kw):
    from sia3d.config import TrainConfig
    base = dict(t_tokens=64, dim=32, heads=4, enc_layers=2, dec_layers=2,
                ffn_dim=64, m_context=16, m_instance=8, context_nsample=32,
                k_nearest=4, clusters=4, cap_dim=32, seed=0)
    base.update(kw)
    return TrainConfig(**base)
