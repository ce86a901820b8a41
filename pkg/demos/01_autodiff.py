"""
Reverse-mode differentiation on numpy arrays
============================================

Every op records a closure that maps the output gradient to its inputs'
gradients. ``backward`` walks the graph once in reverse creation order.
"""

import numpy as np

from niesr import tensor as T
from niesr.tensor import Tensor, check_gradient

rng = np.random.default_rng(0)

# a small expression: softmax over a matrix product, then a weighted sum
a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
b = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
w = Tensor(rng.standard_normal((3, 5)))
loss = (T.softmax(a @ b) * w).sum()
T.backward(loss)
print("loss", loss.item())
print("d loss / d a\n", a.grad)

# the tape gradient agrees with central differences
err = check_gradient(lambda: (T.softmax(a @ b) * w).sum(), [a, b])
print("max relative error vs finite differences:", err)

# the fused LSTM op runs a whole padded batch; outputs past each length are zero
H = 3
x = Tensor(rng.standard_normal((2, 6, 2)))
mask = np.array([[1] * 6, [1, 1, 1, 1, 0, 0]], dtype=bool)
w_ih, w_hh, bias = (Tensor(rng.standard_normal(s) * 0.5) for s in ((4 * H, 2), (4 * H, H), (4 * H,)))
out = T.lstm_sequence(x, mask, w_ih, w_hh, bias)
print("LSTM output for the short utterance:\n", out.data[1].round(3))

# non-finite values are caught at the op that produced them
try:
    T.log(Tensor(np.array([0.0])))
except T.NonFiniteError as e:
    print("caught:", e)
