"""
Checking the hand-written backward pass
=======================================

Build a small layer-normed critic ensemble, push a random upstream
gradient through it and compare with central differences along a few
random directions in parameter space.
"""
import numpy as np

from sopelab import numerics as nx

rng = np.random.default_rng(0)
params = nx.init_mlp([4, 32, 32, 1], rng, layer_norm=True, ensemble=3)
x = rng.normal(size=(16, 4))

out, tape = nx.forward(params, x)
upstream = rng.normal(size=out.shape)
grads = nx.backward(params, tape, upstream)

# directional derivative two ways
h = 1e-5
for trial in range(3):
    d = [rng.normal(size=a.shape) for a in params.arrays()]
    analytic = sum((g * v).sum() for g, v in zip(grads.arrays(), d))
    plus = params.with_arrays([a + h * v for a, v in zip(params.arrays(), d)])
    minus = params.with_arrays([a - h * v for a, v in zip(params.arrays(), d)])
    numeric = ((nx.forward(plus, x)[0] - nx.forward(minus, x)[0]) * upstream).sum() / (2 * h)
    print(f"direction {trial}: analytic {analytic:+.8f}  numeric {numeric:+.8f}")

# one Adam step moves every parameter by roughly the learning rate
state = nx.AdamState.for_params(params, lr=1e-3)
before = params.copy()
nx.adam_step(params, grads, state)
moved = max(np.abs(a - b).max() for a, b in zip(params.arrays(), before.arrays()))
print("largest first-step move:", moved)
