# %% [markdown]
# # Ideal future volume from planned routes
#
# Every navigated trip logs its planned hops with ETA slots. Counting, for
# each segment and slot, how many already-launched trips are planned to
# enter it f slots later gives the volume cube nu[s, t, f].

# %%
import numpy as np

from hstgcn.features import NavigationLog, TimeGrid, aggregate_routes
from hstgcn.network import generate_network
from hstgcn.sim import FundamentalDiagram, default_demand, propagate_traffic

# one trip launched at slot 10 entering segment 1 at slot 12
nu = aggregate_routes(NavigationLog.from_records([(0, 10, [(1, 12)])]), 30, 2, 12).nu
print("nonzero (segment, slot, lead):", [tuple(int(v) for v in ix) for ix in np.argwhere(nu)])

# %% [markdown]
# With every trip navigated and vehicles following their plans exactly,
# the lead-0 slice reproduces the simulator's entry counts.

# %%
grid = TimeGrid(weeks_train=1, weeks_test=0)
net = generate_network("grid", 48, seed=1)
demand = default_demand(net, grid, seed=1, p_nav=1.0)
sim = propagate_traffic(net, demand, FundamentalDiagram.for_network(net), grid, seed=1, days=range(2),
                        follow_plan=True)
cube = aggregate_routes(sim.log, grid.n_slots, net.n, 12)
print("max |nu[..., 0] - entries| =", int(np.abs(cube.nu[..., 0] - sim.nav_volume).max()))

# %% [markdown]
# Longer leads see fewer trips: only those already on the road count.

# %%
busy = int(np.argmax(sim.nav_volume.sum(axis=1)))
t = 120
print(f"segment {busy}, slot {t}: nu by lead", cube.nu[busy, t].tolist())
print("realised entries over the next 12 slots:", sim.nav_volume[busy, t:t + 13].tolist())
