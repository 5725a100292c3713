"""Tensor op values, autodiff semantics, and the optimizer step."""

import numpy as np
import pytest

from sia3d import ndtensor as nd
from sia3d.ndtensor import Tensor, ShapeError, AdamW, adamw_step, clip_grad_global_norm, cosine_lr

from helpers import fd_gradcheck, op_cases


def test_matmul_identity():
    a = nd.tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = nd.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(nd.matmul(a, eye).data, a.data)


def test_softmax_symmetry():
    y = nd.softmax(nd.tensor([0.0, 0.0, 0.0]))
    assert np.allclose(y.data, [1 / 3, 1 / 3, 1 / 3])


def test_l2_normalize_hand():
    y = nd.l2_normalize(nd.tensor([3.0, 4.0]), axis=0)
    assert np.allclose(y.data, [0.6, 0.8])


def test_l2_normalize_zero_vector_maps_to_zero():
    y = nd.l2_normalize(nd.tensor([0.0, 0.0, 0.0]), axis=0)
    assert np.all(y.data == 0.0)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    x = nd.tensor(rng.normal(size=(7, 11)))
    s = nd.softmax(x, axis=-1).data.sum(axis=-1)
    assert np.allclose(s, 1.0, atol=1e-9)


def test_l2_normalize_unit_norm():
    rng = np.random.default_rng(1)
    x = nd.tensor(rng.normal(size=(5, 8)) + 0.2)
    n = np.linalg.norm(nd.l2_normalize(x, axis=-1).data, axis=-1)
    assert np.allclose(n, 1.0, atol=1e-9)


def test_backward_sum_gives_ones():
    x = nd.tensor([1.0, 2.0, 3.0], requires_grad=True)
    nd.backward(nd.sum_(x))
    assert np.allclose(x.grad, [1.0, 1.0, 1.0])


def test_backward_square():
    x = nd.tensor([3.0], requires_grad=True)
    nd.backward(nd.sum_(nd.mul(x, x)))
    assert np.allclose(x.grad, [6.0])


def test_backward_requires_scalar():
    x = nd.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        nd.backward(nd.mul(x, 2.0))


def test_grad_accumulates_until_zero_grad():
    x = nd.tensor([2.0], requires_grad=True)
    nd.backward(nd.sum_(nd.mul(x, x)))
    nd.backward(nd.sum_(nd.mul(x, x)))
    assert np.allclose(x.grad, [8.0])
    x.zero_grad()
    assert x.grad is None


def test_shape_mismatch_names_both_shapes():
    a = nd.tensor(np.zeros((2, 3)))
    b = nd.tensor(np.zeros((4, 5)))
    with pytest.raises(ShapeError) as ei:
        nd.add(a, b)
    assert "(2, 3)" in str(ei.value) and "(4, 5)" in str(ei.value)


def test_axis_out_of_range():
    x = nd.tensor(np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        nd.softmax(x, axis=5)


def test_cross_entropy_uniform_closed_form():
    logits = nd.tensor(np.zeros((4, 16)))
    ce = nd.cross_entropy_with_logits(logits, np.zeros(4, dtype=int))
    assert np.allclose(ce.data, np.log(16.0))


def test_cross_entropy_rejects_bad_target():
    logits = nd.tensor(np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        nd.cross_entropy_with_logits(logits, np.asarray([0, 7]))


def test_backward_rerun_bit_identical():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(6, 6))
    x = rng.normal(size=(4, 6))

    def run():
        wt = Tensor(w.copy(), requires_grad=True)
        h = nd.relu(nd.matmul(Tensor(x), wt))
        nd.backward(nd.sum_(nd.mul(h, h)))
        return wt.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1, g2)


@pytest.mark.parametrize("case_seed", [0, 1, 2])
def test_gradcheck_all_ops_quick(case_seed):
    rng = np.random.default_rng(100 + case_seed)
    for name, params, make_loss in op_cases(rng):
        err = fd_gradcheck(make_loss, params)
        assert err < 1e-4, f"{name}: fd mismatch {err}"


def test_gather_backward_scatter_adds():
    x = nd.tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
    y = nd.gather(x, np.asarray([1, 1, 3]), axis=0)
    nd.backward(nd.sum_(y))
    expect = np.zeros((4, 2))
    expect[1] = 2.0
    expect[3] = 1.0
    assert np.allclose(x.grad, expect)


def test_max_over_set_ties_route_to_first():
    x = nd.tensor([[2.0, 2.0, 1.0]], requires_grad=True)
    nd.backward(nd.sum_(nd.max_over_set(x, axis=1)))
    assert np.allclose(x.grad, [[1.0, 0.0, 0.0]])


# -- optimizer -----------------------------------------------------------------

def test_adamw_zero_grad_no_decay_keeps_param():
    p = nd.tensor([1.0, -2.0], requires_grad=True)
    state = {}
    adamw_step([p], [np.zeros(2)], lr=0.1, weight_decay=0.0, betas=(0.9, 0.999),
               eps=1e-8, state=state)
    assert np.allclose(p.data, [1.0, -2.0])


def test_adamw_descends_on_square():
    p = nd.tensor([1.0], requires_grad=True)
    nd.backward(nd.sum_(nd.mul(p, p)))
    opt = AdamW([p], lr=0.1)
    opt.step()
    assert p.data[0] < 1.0


def test_adamw_rejects_nonpositive_lr():
    p = nd.tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        adamw_step([p], [np.ones(1)], lr=0.0, weight_decay=0.0,
                   betas=(0.9, 0.999), eps=1e-8, state={})


def test_adamw_converges_on_quadratic_bowl():
    p = nd.tensor([3.0, -2.0], requires_grad=True)
    opt = AdamW([p], lr=0.05)
    for _ in range(200):
        opt.zero_grad()
        nd.backward(nd.sum_(nd.mul(p, p)))
        opt.step()
    assert np.all(np.abs(p.data) < 1e-2)


def test_clip_grad_global_norm():
    a = nd.tensor([3.0], requires_grad=True)
    b = nd.tensor([4.0], requires_grad=True)
    a.grad = np.asarray([3.0])
    b.grad = np.asarray([4.0])
    norm = clip_grad_global_norm([a, b], 1.0)
    assert abs(norm - 5.0) < 1e-9
    total = np.sqrt(a.grad[0] ** 2 + b.grad[0] ** 2)
    assert abs(total - 1.0) < 1e-6


def test_cosine_schedule_endpoints():
    assert abs(cosine_lr(0, 100, 5e-4, 1e-6) - 5e-4) < 1e-12
    assert cosine_lr(100, 100, 5e-4, 1e-6) == 1e-6
    mid = cosine_lr(50, 100, 5e-4, 1e-6)
    assert 1e-6 < mid < 5e-4
