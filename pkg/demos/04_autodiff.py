"""
The little autodiff kernel
==========================

Everything trains on a handful of numpy-backed primitives with explicit
shapes. Here: a two-layer network by hand, its gradient, and a check against
central differences.
"""

import numpy as np

from askdlab import numkernel as nk
from askdlab.numkernel import Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 3)))
w1 = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
w2 = Tensor(rng.normal(size=(5, 1)), requires_grad=True)

h = nk.sigmoid(nk.matmul(x, w1))
loss = nk.sum_reduce(nk.mul(nk.matmul(h, w2), nk.matmul(h, w2)))
nk.backward(loss)
print("loss", loss.item())
print("dL/dw2", w2.grad.ravel().round(4))

# the graph is a plain topological order of nodes
g = nk.Graph(loss)
print(len(g.nodes), "nodes,", len(g.leaves()), "leaves")


def f(w):
    return nk.sum_reduce(nk.mul(nk.matmul(nk.sigmoid(nk.matmul(x, w)), w2),
                                nk.matmul(nk.sigmoid(nk.matmul(x, w)), w2)))


print("max relative error vs central differences:", nk.finite_diff_check(f, w1.data))
print("primitives:", ", ".join(nk.PRIMITIVES))
