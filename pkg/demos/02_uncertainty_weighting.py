"""Learned loss weighting via per-objective noise scales.

Plots the single-objective loss exp(-s) * L + s/2 over the log-variance s
for several loss levels, marks the closed-form minimizer s* = log(2L), and
then lets Adam adapt (s_main, s_aux) against frozen losses to show the
learned sigmas settling at sigma^2 = 2L.
"""

import math
import os

import matplotlib.pyplot as plt
import numpy as np
import torch

from vesselseg.uncertainty import (UncertaintyParams, combined_loss,
                                   single_objective_loss)

out_dir = os.path.join(os.path.dirname(__file__), "output")
os.makedirs(out_dir, exist_ok=True)

fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4.2))

s = np.linspace(-4, 4, 400)
for L in (0.1, 0.5, 2.0):
    ax1.plot(s, [single_objective_loss(L, si) for si in s], label=f"L = {L}")
    s_star = math.log(2 * L)
    ax1.plot(s_star, single_objective_loss(L, s_star), "ko", ms=4)
ax1.set_xlabel(r"$s = \log\sigma^2$")
ax1.set_ylabel("weighted loss")
ax1.set_title(r"$e^{-s}L + s/2$, dots at $s^*=\log 2L$")
ax1.legend()

l_main, l_aux = 0.8, 0.25
params = UncertaintyParams()
opt = torch.optim.Adam(params.parameters(), lr=0.05)
track = {"sigma_main": [], "sigma_aux": []}
for _ in range(1500):
    opt.zero_grad()
    bd = combined_loss(l_main, l_aux, params)
    bd.combined.backward()
    opt.step()
    track["sigma_main"].append(bd.sigma_main)
    track["sigma_aux"].append(bd.sigma_aux)

for name, target in (("sigma_main", math.sqrt(2 * l_main)),
                     ("sigma_aux", math.sqrt(2 * l_aux))):
    ax2.plot(track[name], label=name)
    ax2.axhline(target, ls="--", c="gray", lw=0.8)
ax2.set_xlabel("optimizer step")
ax2.set_ylabel(r"$\sigma$")
ax2.set_title(r"adaptation toward $\sigma^2 = 2L$ (frozen losses)")
ax2.legend()

print(f"final sigma_main {track['sigma_main'][-1]:.4f} "
      f"(target {math.sqrt(2 * l_main):.4f})")
print(f"final sigma_aux  {track['sigma_aux'][-1]:.4f} "
      f"(target {math.sqrt(2 * l_aux):.4f})")

fig.tight_layout()
path = os.path.join(out_dir, "uncertainty_weighting.png")
fig.savefig(path, dpi=120)
print(f"figure -> {path}")
