"""
Masked discrete diffusion on a small codebook
=============================================

Corrupt a token sequence forward in time, look at how the mask takes over,
then run the reverse chain with a perfect denoiser and watch it come back.
"""

import numpy as np
import torch

from ctxtts.diffusion import backward_step, build_schedule, forward_corrupt, posterior

K, T = 8, 100
sched = build_schedule(T, K)

# cumulative keep / move / mask probabilities of a real token
for t in (1, 25, 50, 75, 100):
    print(f"t={t:3d}  keep={sched.alpha_bar[t] + sched.beta_bar[t]:.3f}  "
          f"each-other={sched.beta_bar[t]:.4f}  mask={sched.gamma_bar[t]:.3f}")

gen = torch.Generator().manual_seed(0)
x0 = torch.randint(1, K + 1, (40,), generator=gen)
print("\nx0   ", "".join(str(int(v)) for v in x0))
for t in (10, 50, 90):
    xt = forward_corrupt(x0, t, sched, gen)
    print(f"x_{t:<3d}", "".join("." if v == sched.mask_index else str(int(v)) for v in xt))

# the posterior over x_{t-1} for a masked position given the clean token 3
print("\nq(x_49 | x_50 = mask, x0 = 3):", np.round(posterior(sched.mask_index, 3, 50, sched), 4))

# reverse chain with p(x0) a point mass on the truth
delta = torch.nn.functional.one_hot(x0 - 1, K).double()
x = torch.full_like(x0, sched.mask_index)
for t in range(T, 0, -1):
    x = backward_step(x, delta, t, sched, gen)
    if t in (75, 50, 25, 1):
        print(f"reverse t={t:3d}", "".join("." if v == sched.mask_index else str(int(v)) for v in x))
print("recovered exactly:", bool(torch.equal(x, x0)))
