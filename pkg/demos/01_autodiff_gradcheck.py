"""
Reverse-mode gradients and finite-difference checks
===================================================

Every gradient the model trains on flows through the small tape in
``repdit.numerics``. This walk-through builds a few expressions, backpropagates
and compares against central differences.
"""

import numpy as np

from repdit import numerics as nx
from repdit.numerics import Tensor

rng = np.random.default_rng(0)

# a scalar loss over a matrix: backward fills .grad on every leaf
w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
x = Tensor(rng.normal(size=(5, 3)))
loss = nx.reduce_mean(nx.square(nx.gelu(nx.matmul(x, w))))
loss.backward()
print("loss", loss.item())
print("dloss/dw row 0", np.round(w.grad[0], 5))

# grad_check returns the worst relative error against central differences
weights = Tensor(rng.normal(size=(5, 4)))
for name, f in [
    ("softmax", lambda t: nx.reduce_sum(nx.mul(nx.softmax(t, axis=-1), weights))),
    ("layer_norm", lambda t: nx.reduce_sum(nx.square(nx.layer_norm(t)))),
    ("sigmoid", lambda t: nx.reduce_mean(nx.sigmoid(t))),
]:
    err = nx.grad_check(f, rng.normal(size=(5, 4)))
    print(f"{name:>10}: max relative error {err:.2e}")

# non-finite values are caught where they appear, not at the end of the graph
try:
    nx.mul(Tensor(np.array([np.inf])), Tensor(np.array([1.0])))
except FloatingPointError as exc:
    print("caught:", exc)
