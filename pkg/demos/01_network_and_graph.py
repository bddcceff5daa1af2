# %% [markdown]
# # Road graph, adjacency and the spectral operator
#
# A 4x4 two-way grid gives 48 directed segments. Travel times from a short
# simulation feed the covariance half of the compound adjacency; the other
# half is a Gaussian kernel on midpoint distances.

# %%
from collections import Counter

import numpy as np

from hstgcn.features import TimeGrid
from hstgcn.network import generate_network
from hstgcn.sim import FundamentalDiagram, default_demand, propagate_traffic
from hstgcn.spectral import build_adjacency, chebyshev_apply, scaled_laplacian

grid = TimeGrid(weeks_train=1, weeks_test=0)
net = generate_network("grid", 48, seed=0)
print(net.n, "segments,", net.n_nodes, "intersections")
print("classes:", dict(Counter(net.road_class)))

# %%
demand = default_demand(net, grid, seed=0, p_nav=0.6)
sim = propagate_traffic(net, demand, FundamentalDiagram.for_network(net), grid, seed=0, days=range(3))
tau = sim.travel_time[:, :3 * grid.slots_per_day]
kmh = 3.6 / tau
print("speed range over three days: %.1f to %.1f km/h" % (kmh.min(), kmh.max()))

# %%
adj = build_adjacency(net, tau)
for name in ("dijkstra", "covariance", "compound"):
    m = getattr(adj, name)
    print(f"{name:10s} nonzero {np.count_nonzero(m):5d}  max off-diagonal {(m - np.diag(np.diag(m))).max():.4f}")

# %% [markdown]
# The scaled Laplacian has its spectrum in [-1, 1], so Chebyshev polynomials
# of it stay bounded. Compare the recurrence with a dense evaluation.

# %%
op = scaled_laplacian(adj.compound)
lam, vec = np.linalg.eigh(op.scaled_laplacian)
print("lambda_max %.6f, spectrum of L~ in [%.6f, %.6f]" % (op.lambda_max, lam.min(), lam.max()))
x = np.random.default_rng(0).normal(size=(net.n, 2))
for k in range(op.chebyshev_order):
    dense = (vec * np.cos(k * np.arccos(np.clip(lam, -1, 1)))) @ vec.T @ x
    print(f"T_{k}: max deviation {np.abs(chebyshev_apply(op, x, k) - dense).max():.2e}")
