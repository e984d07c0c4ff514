# %% [markdown]
# # Prediction and generation
#
# Prediction feeds the observed outputs back into the decoder (teacher
# forcing); generation feeds back its own predicted means.  Errors compound in
# generation, so its NRMSE should not be lower.

# %%
from dataclasses import replace

from attentive_gp import cli
from attentive_gp.config import load
from attentive_gp.evaluation import FeatureCache, evaluate
from attentive_gp.trainer import blockwise_train

cfg = load("../configs/suspension.cfg")
cfg = replace(cfg, train=replace(cfg.train, epochs=150))
ds, record = cli.prepare_data(cfg)
model, trace = blockwise_train(cli._init_model(cfg), ds.train, cfg.train_config())
print("final training NLL", round(trace.final_loss, 1))

# %%
cache = FeatureCache(model, ds.train)
for mode in ("prediction", "generation"):
    res, err, cov = evaluate(cache, ds.test, mode)
    print(f"{mode:10s} nrmse {err:.4f}  2-sigma coverage {cov:.3f}")

# %% [markdown]
# The rollout of the first test window, in raw units.

# %%
res, _, _ = evaluate(cache, ds.test, "generation")
truth = record.invert_targets(ds.test.targets[0])
mean = record.invert_targets(res.mean[0])
for t, (a, b, s) in enumerate(zip(truth, mean, record.invert_scale(res.std[0])), 1):
    print(f"t={t}  target {a:+.4f}  mean {b:+.4f}  2 sigma {2 * s:.4f}")
