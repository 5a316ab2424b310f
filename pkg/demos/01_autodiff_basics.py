"""A walk through the tensor core: record a computation on a graph, run the
backward pass, and confirm the gradients against central differences.

Run with:  python demos/01_autodiff_basics.py
"""

import numpy as np

from c2fnet import tensor as T
from c2fnet.gradcheck import grad_check
from c2fnet.ops import ConvSpec, conv2d, upsample_bilinear
from c2fnet.tensor import Graph, backward, tensor

rng = np.random.default_rng(0)

# Every value is a rank-4 (batch, channel, height, width) float64 tensor.
x = tensor(rng.normal(size=(1, 2, 8, 8)), requires_grad=True)
w = tensor(rng.normal(size=(4, 2, 3, 3)), requires_grad=True)
b = tensor(np.zeros((1, 4, 1, 1)), requires_grad=True)

# Forward passes record onto an explicit graph; passing graph=None instead
# runs the same computation in inference mode with nothing retained.
g = Graph()
y = conv2d(x, w, b, ConvSpec(2, 4, (3, 3), padding=1), g)
y = T.relu(y, g)
y = upsample_bilinear(y, (16, 16), g)
loss = T.mean_all(T.mul(y, y, g), g)
print(f"recorded {len(g.nodes)} operations; loss = {loss.data[0, 0, 0, 0]:.6f}")

# backward() walks the graph once in reverse and accumulates into .grad.
backward(g, loss)
print(f"|dL/dx| mean = {np.abs(x.grad).mean():.6f}")
print(f"|dL/dw| mean = {np.abs(w.grad).mean():.6f}")

# The checker re-runs the function around every probed element.
def f(inputs, graph):
    xi, wi, bi = inputs
    out = conv2d(xi, wi, bi, ConvSpec(2, 4, (3, 3), padding=1), graph)
    out = T.relu(out, graph)
    return T.mean_all(T.mul(out, out, graph), graph)

rep = grad_check(f, [x, w, b], step=1e-5, names=["x", "w", "b"])
for name, err in rep.per_input.items():
    print(f"finite-difference agreement for {name}: max rel err {err:.2e}")
assert rep.passed(1e-4)
print("gradients verified")
