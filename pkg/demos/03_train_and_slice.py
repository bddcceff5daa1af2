# %% [markdown]
# # A small ablation on a reduced scenario
#
# Three weeks on a 24-segment grid, two of them for training. Both hybrid
# variants train for a few hundred steps; the point is the workflow, not
# the numbers (the full-size run lives in the acceptance tests).

# %%
import time

import numpy as np

from hstgcn.config import RunConfig
from hstgcn.pipeline import run_ablation

cfg = RunConfig()
cfg.scenario.n_target = 24
cfg.scenario.weeks_train, cfg.scenario.weeks_test = 2, 1
cfg.train.epochs, cfg.train.steps_per_epoch, cfg.train.val_stride = 4, 60, 4

t0 = time.perf_counter()
res = run_ablation(cfg, seeds=(0,), variants=("hstgcn", "hstgcn1"), log=print)
print(f"done in {time.perf_counter() - t0:.0f}s")

# %%
rep = res.reports[0]
for kind in ("full", "C", "NRC"):
    row = "  ".join(f"{v} {rep.value(kind, v, 'MAE'):.5f}" for v in rep.variants())
    print(f"{kind:4s} MAE  {row}")

# %% [markdown]
# Error by forecast step on the non-recurring slice.

# %%
for v in ("hstgcn", "hstgcn1"):
    print(v, np.round([rep.value("NRC", v, "MAE", h) for h in range(1, 13)], 4).tolist())
