"""The tensor substrate: reverse-mode autodiff over a fixed op set."""

import numpy as np

from sia3d import ndtensor as nd
from sia3d.ndtensor import AdamW, Tensor

# build a tiny 2-layer MLP by hand and differentiate through it
rng = np.random.default_rng(0)
w1 = Tensor(rng.normal(0, 0.5, size=(4, 16)), requires_grad=True)
w2 = Tensor(rng.normal(0, 0.5, size=(16, 1)), requires_grad=True)
x = Tensor(rng.normal(size=(32, 4)))
target = Tensor(np.sin(x.data.sum(axis=1, keepdims=True)))


def forward():
    h = nd.relu(nd.matmul(x, w1))
    return nd.matmul(h, w2)


def loss_fn():
    diff = nd.sub(forward(), target)
    return nd.mean_over_set(nd.reshape(nd.mul(diff, diff), (-1,)), axis=0)


loss = loss_fn()
nd.backward(loss)
print("loss %.4f, grad norms: w1 %.3f w2 %.3f"
      % (loss.item(), np.linalg.norm(w1.grad), np.linalg.norm(w2.grad)))

# gradients match central finite differences
h = 1e-5
i = 7
orig = w1.data.flat[i]
w1.data.flat[i] = orig + h
f1 = loss_fn().item()
w1.data.flat[i] = orig - h
f2 = loss_fn().item()
w1.data.flat[i] = orig
print("analytic %.6f vs finite difference %.6f" % (w1.grad.flat[i], (f1 - f2) / (2 * h)))

# AdamW drives the fit
opt = AdamW([w1, w2], lr=1e-2)
for step in range(200):
    opt.zero_grad()
    nd.backward(loss_fn())
    opt.step()
print("after 200 AdamW steps: loss %.5f" % loss_fn().item())
