"""
The LSTM language model, checked by hand
========================================

Two stacked LSTM layers with the input embedding reused as the output
projection. The backward pass is written out explicitly, so it is worth
watching it agree with finite differences.
"""

import math

import numpy as np

from curricle import seqmodel

rng = np.random.default_rng(0)
V, H, B, T = 6, 3, 2, 4
params = seqmodel.init_params(V, H, H, rng, scale=0.5)
x = rng.integers(0, V, (B, T))
y = rng.integers(0, V, (B, T))
print("parameters:", params.n_params(), [name for name, _ in params.named()])

loss, grads, _ = seqmodel.loss_and_grads(params, x, y)
print("loss", loss, " uniform would be", math.log(V))

# central differences on a handful of coordinates
step = 1e-5
for name, a in params.named():
    g = dict(grads.named())[name]
    i = int(rng.integers(0, a.size))
    flat, old = a.reshape(-1), a.reshape(-1)[i]
    flat[i] = old + step
    lp = seqmodel.loss_and_grads(params, x, y)[0]
    flat[i] = old - step
    lm = seqmodel.loss_and_grads(params, x, y)[0]
    flat[i] = old
    fd = (lp - lm) / (2 * step)
    print(f"{name:>9}[{i:2d}]  analytic {g.reshape(-1)[i]: .8f}  numeric {fd: .8f}")

# with tied weights the logits are hidden states dotted with embedding rows
logits, _, cache = seqmodel.forward(params, x)
h = cache.h[-1][0, -1]
print("\nlogit check:", logits[0, -1, 2], "=", h @ params.embedding[2] + params.b_out[2])

# clipping rescales the whole gradient to the threshold; below it nothing changes
for scale in (1.0, 10.0):
    g = grads.map(lambda a: a * scale)
    print("grad norm", seqmodel.global_norm(g), "->",
          seqmodel.global_norm(seqmodel.clip_gradients(g, 0.5)))

# greedy continuation with a length-normalized log-probability score
ids, score = seqmodel.generate(params, [1, 2], seqmodel.GenerationConfig(max_len=5))
print("continuation", ids, "score", score)
