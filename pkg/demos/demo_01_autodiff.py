"""
Reverse-mode differentiation on numpy arrays
============================================

Tensors record the operations applied to them. ``backward`` walks that
record in reverse and leaves gradients on the leaves.
"""

import numpy as np

from mmrb import tensor as T
from mmrb.ops import conv2d, relu, softmax
from mmrb.tensor import Tensor, backward, default_dtype, grad

# A leaf that asks for gradients, and a small expression built from it.
w = Tensor([3.0, -4.0], requires_grad=True)
loss = T.sum(w * w) / 2.0
backward(loss)
print("d/dw of |w|^2 / 2 at", w.data, "->", w.grad.data)

# ``grad`` returns arrays instead of writing ``.grad``; attacks use it so
# that model parameters are left untouched.
x = Tensor(np.linspace(-1, 1, 5), requires_grad=True)
(gx,) = grad(T.sum(T.tanh(x)), [x])
print("d/dx sum(tanh x):", np.round(gx, 4), " expected:", np.round(1 - np.tanh(x.data) ** 2, 4))

# Convolution, ReLU and softmax compose like any other op.
rng = np.random.default_rng(0)
img = Tensor(rng.uniform(size=(1, 1, 6, 6)), requires_grad=True)
kernel = Tensor(rng.normal(size=(2, 1, 3, 3)), requires_grad=True)
feat = relu(conv2d(img, kernel, padding=1))
probs = softmax(T.reshape(feat, (1, -1)))
backward(T.sum(probs * probs))
print("conv output", feat.shape, "| kernel gradient norm", round(float(np.linalg.norm(kernel.grad.data)), 5))

# Gradient checks run on a float64 shadow path: inside ``default_dtype``
# new tensors are double precision.
with default_dtype(np.float64):
    a = rng.normal(size=(3, 4))
    f = lambda arr: T.sum(T.exp(Tensor(arr) * 0.5)).item()  # noqa: E731
    at = Tensor(a, requires_grad=True)
    (g,) = grad(T.sum(T.exp(at * 0.5)), [at])
    h = 1e-6
    e = np.zeros_like(a)
    e[1, 2] = 1
    numeric = (f(a + h * e) - f(a - h * e)) / (2 * h)
print("analytic vs central difference:", g[1, 2], numeric)
