"""
Reverse-mode differentiation on a tape
======================================

Every model in this package is trained through one small engine:
float64 tensors, a tape that records each operation, and a backward
pass that replays the tape in reverse.  This script differentiates a
tiny two-layer function by hand-checkable math, then lets the built-in
finite-difference harness confirm the same gradients numerically.
"""

import numpy as np

from relground import autodiff as ad

# --- record a computation ---------------------------------------------------
# Leaves are the tensors we want gradients for; constants are everything else.

tape = ad.Tape()
w = tape.leaf(np.array([[0.5, -1.0], [2.0, 0.25]]))
b = tape.leaf(np.array([[0.1, -0.2]]))
x = ad.constant(np.array([[1.0, 3.0]]))

hidden = ad.tanh(ad.add(ad.matmul(x, w), b))
loss = ad.reduce_sum(ad.mul(hidden, hidden))
print("loss =", float(loss.data))

# --- pull gradients back through the tape -----------------------------------
grads = ad.backward(tape, loss)
print("d loss / d w =\n", grads[w.node_id])
print("d loss / d b =", grads[b.node_id])

# A quick sanity check by hand: for y = tanh(u), d(y^2)/du = 2 y (1 - y^2).
y = np.tanh(np.array([[1.0, 3.0]]) @ w.data + b.data)
du = 2.0 * y * (1.0 - y ** 2)
print("hand-computed d loss / d b =", du)

# --- let the numeric harness do the arguing ---------------------------------
# finite_difference_check re-evaluates the function, wiggles every entry of
# every leaf, and reports the worst analytic-vs-numeric relative error.


def fn(t, leaves):
    ww, bb = leaves
    h = ad.tanh(ad.add(ad.matmul(x, ww), bb))
    return ad.reduce_sum(ad.mul(h, h))


report = ad.finite_difference_check(fn, [w.data, b.data])
print("finite differences agree:", report.passed,
      f"(max relative error {report.max_rel_error:.2e})")
