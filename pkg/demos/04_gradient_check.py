# %% [markdown]
# # Checking the hand-written gradients
#
# The model is a graph of primitive operators with reverse-mode adjoints.
# Central differences on a 4-segment instance confirm every parameter
# tensor. The L1 loss has a kink at zero, so points too close to it are
# resampled.

# %%
import numpy as np

from hstgcn.model import HSTGCN, ArchitectureConfig, Normalizer
from hstgcn.spectral import scaled_laplacian
from hstgcn.tensor import finite_difference_check

n = 4
w = np.ones((n, n)) - np.eye(n)
model = HSTGCN(ArchitectureConfig("hstgcn", n=n), scaled_laplacian(w), seed=0,
               normalizer=Normalizer(np.full(14, 0.06), np.full(14, 0.02), np.full(26, 2.0)))


def sample(rng):
    return {"V": rng.poisson(2.0, size=(2, n, 6, 26)).astype(float),
            "T": rng.uniform(0.03, 0.1, size=(2, n, 6, 14)),
            "y": rng.uniform(0.03, 0.1, size=(2, n, 12))}


rng = np.random.default_rng(0)
for name in model.params:
    err = finite_difference_check(model.graph, sample(rng), model.loss, name, probes=32, resample=sample)
    print(f"{name:28s} {str(model.params[name].shape):16s} max rel err {err:.1e}")
