# coding: utf-8

# # A small reverse-mode autodiff tape
#
# All training in this package runs on a numpy tape. Operations performed
# inside a ``Tape`` block are recorded and ``backward`` walks them in reverse.

import numpy as np

from exchangeable import diffcore as dc

x = dc.Tensor(np.array([3.0]), requires_grad=True)
with dc.Tape() as tape:
    y = dc.reduce_sum(dc.mul(x, x))
dc.backward(y, tape)
print("d(x^2)/dx at 3:", x.grad)


# ## Softmax Jacobian
#
# For equal logits the softmax is flat at 1/2 and its gradient with respect to
# the first logit, read through the first output, is 1/4.

v = dc.Tensor(np.zeros(2), requires_grad=True)
with dc.Tape() as tape:
    out = dc.reduce_sum(dc.mul(dc.softmax(v), np.array([1.0, 0.0])))
dc.backward(out, tape)
print("softmax gradient:", v.grad)


# ## Checking gradients against central differences
#
# A two-layer tanh network with a scalar readout. The reported number is the
# worst relative error over every parameter entry.

rng = np.random.default_rng(0)
W1 = dc.Tensor(rng.normal(size=(4, 3)), True, "W1")
b1 = dc.Tensor(np.zeros(4), True, "b1")
W2 = dc.Tensor(rng.normal(size=(1, 4)), True, "W2")
xs = rng.normal(size=(5, 3))


def loss():
    h = dc.tanh_activation(dc.affine(W1, b1, xs))
    return dc.mean(dc.square(dc.affine(W2, np.zeros(1), h)))


print("worst relative error:", dc.finite_difference_check(loss, [W1, b1, W2]))


# ## Adam
#
# A few hundred Adam steps drive the loss down.

params = [W1, b1, W2]
state = dc.AdamState.for_params(params, lr=0.05)
for step in range(300):
    dc.zero_grad(params)
    with dc.Tape() as tape:
        value = loss()
    dc.backward(value, tape)
    grads, _ = dc.clip_grad_norm(dc.grads_of(params), 0.5)
    dc.adam_step(params, grads, state)
    if step % 100 == 0:
        print(f"step {step:3d}  loss {value.item():.6f}")
print(f"final loss {loss().item():.2e}")
