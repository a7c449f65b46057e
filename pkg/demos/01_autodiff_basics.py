"""A tour of the reverse-mode autodiff core.

Builds a two-layer perceptron out of the tensor primitives, backpropagates a
loss, and checks every gradient against central finite differences.

Run:  python3 demos/01_autodiff_basics.py
"""

import numpy as np

import labelmask.tensor as T

T.set_default_dtype("float64")
rng = np.random.default_rng(0)

# A tiny regression problem: y = sin of a linear projection, fit by an MLP.
x = rng.standard_normal((32, 4))
y = np.sin(x @ rng.standard_normal((4, 1)))

w1 = T.parameter(rng.standard_normal((4, 16)) * 0.5, name="w1")
b1 = T.parameter(np.zeros(16), name="b1")
w2 = T.parameter(rng.standard_normal((16, 1)) * 0.5, name="w2")
b2 = T.parameter(np.zeros(1), name="b2")
params = [w1, b1, w2, b2]


def forward():
    hidden = T.relu(T.add(T.matmul(T.tensor(x), w1), b1))
    out = T.add(T.matmul(hidden, w2), b2)
    diff = T.add(out, T.tensor(-y))
    return T.scale(T.sum_all(T.mul(diff, diff)), 1.0 / len(x))


print("step  loss")
for step in range(200):
    T.zero_grads(params)
    with T.Tape() as tape:
        loss = forward()
        tape.backward(loss)
    for p in params:
        p.data -= 0.05 * p.grad
    if step % 40 == 0:
        print(f"{step:4d}  {loss.item():.6f}")

print("\nchecking analytic gradients against finite differences...")
result = T.grad_check(forward, {"w1": w1, "b1": b1, "w2": w2, "b2": b2})
for name, err in sorted(result.per_parameter.items()):
    print(f"  {name}: rel error {err:.3e}")
print(f"passed: {result.passed} (max {result.max_rel_error:.3e}, "
      f"tolerance {result.tolerance})")
