"""Straight-line re-implementation of a seed-42 [3, 4, 2] ReLU MLP forward pass.

Run directly to print the frozen values used by tests/test_nn.py.
"""
import numpy as np

rng = np.random.default_rng(42)
a1 = np.sqrt(6.0 / (3 + 4))
w1 = rng.uniform(-a1, a1, size=(4, 3))
a2 = np.sqrt(6.0 / (4 + 2))
w2 = rng.uniform(-a2, a2, size=(2, 4))
x = np.array([0.5, -1.25, 2.0])
h = []
for r in range(4):
    s = 0.0
    for c in range(3):
        s += w1[r, c] * x[c]
    h.append(s if s > 0 else 0.0)
out = []
for r in range(2):
    s = 0.0
    for c in range(4):
        s += w2[r, c] * h[c]
    out.append(s)
print(repr(out))
