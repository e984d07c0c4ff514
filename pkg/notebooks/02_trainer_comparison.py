# %% [markdown]
# # Block-wise versus full-batch training
#
# Block-wise training alternates mini-batch steps on the network weights with
# full-batch steps on the GP hyperparameters.  Both trainers start from the
# same initialization; we compare the loss curves and the epoch at which each
# first reaches the full-batch final loss.

# %%
from dataclasses import replace

import numpy as np

from attentive_gp import cli
from attentive_gp.config import load
from attentive_gp.trainer import epochs_to_reach

cfg = load("../configs/compare_sin.cfg")
# three seeds and a shorter run keep this notebook to a few minutes
cfg = replace(cfg, train=replace(cfg.train, epochs=400), compare=replace(cfg.compare, seeds=3))
results = cli.compare_trainers(cfg)

# %%
for seed, tb, tf in results:
    target = cli.final_loss(tf)
    print(f"seed {seed}: final blockwise {cli.final_loss(tb):.1f}  fullbatch {target:.1f}  "
          f"reach {epochs_to_reach(tb, target)} vs {epochs_to_reach(tf, target)}")

# %% [markdown]
# Mean curves, every 50 rounds.

# %%
mb = np.mean([tb.losses for _, tb, _ in results], axis=0)
mf = np.mean([tf.losses for _, _, tf in results], axis=0)
for k in range(0, len(mb), 50):
    print(f"round {k + 1:4d}  blockwise {mb[k]:9.1f}  fullbatch {mf[k]:9.1f}")
