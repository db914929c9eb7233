"""
Reverse-mode differentiation in a few lines
===========================================

Tensors record the operation that produced them. ``backward`` walks that
record in reverse and fills ``.grad`` on every input that asked for one.
"""

import numpy as np

from mtvl import tensor as tn
from mtvl.tensor import Tensor, backward, grad_check, no_grad

# a tiny logistic unit: p = sigmoid(w . x + b)
x = Tensor(np.array([0.5, -1.0, 2.0]))
w = Tensor(np.array([0.1, 0.2, -0.3]), requires_grad=True)
b = Tensor(np.array(0.05), requires_grad=True)
p = tn.sigmoid((w * x).sum() + b)
print("p =", p.item())

backward(p)
print("dp/dw =", w.grad)
# the closed form is p (1 - p) x
print("check =", p.item() * (1 - p.item()) * x.data)

# central differences agree with backprop on anything built from the ops
A = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
err = grad_check(lambda: (tn.softmax(A, axis=-1) * np.arange(4.0)).sum(), A)
print(f"softmax grad check, max relative error {err:.1e}")

# inside no_grad nothing is recorded, which keeps evaluation cheap
with no_grad():
    q = tn.sigmoid((w * x).sum() + b)
print("recorded parents under no_grad:", len(q._parents))
