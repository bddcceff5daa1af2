"""Mesoscopic traffic simulation with navigation logging.

Each day is simulated independently over the 06:00-22:00 window. Vehicles
spawn per origin-destination pair as Poisson arrivals, receive the
minimum-travel-time route under the travel times in force at launch, and
then move along that frozen route. Segment speed follows a triangular
fundamental diagram of the time-averaged density in the previous slot.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.stats import poisson

from .features import NavigationLog, TimeGrid
from .network import RoadNetwork

# (critical density, jam density) in veh/km per road class
FD_DEFAULTS = {
    "freeway": (25.0, 120.0),
    "highway": (20.0, 120.0),
    "expressway": (20.0, 120.0),
    "major": (15.0, 120.0),
}


@dataclass
class FundamentalDiagram:
    free_speed_kmh: np.ndarray
    critical_density: np.ndarray
    jam_density: np.ndarray
    v_min: float = 5.0

    def __post_init__(self):
        self.free_speed_kmh = np.asarray(self.free_speed_kmh, dtype=float)
        self.critical_density = np.asarray(self.critical_density, dtype=float)
        self.jam_density = np.asarray(self.jam_density, dtype=float)
        if np.any(self.free_speed_kmh <= 0):
            raise ValueError("free-flow speed must be positive")
        if np.any(self.critical_density <= 0) or np.any(self.critical_density >= self.jam_density):
            raise ValueError("need 0 < critical density < jam density")

    @classmethod
    def for_network(cls, net: RoadNetwork, table=None, v_min=5.0):
        table = table or FD_DEFAULTS
        kc = [table[c][0] for c in net.road_class]
        kj = [table[c][1] for c in net.road_class]
        return cls(net.free_speed_kmh, kc, kj, v_min)

    @property
    def capacity(self):
        """Peak flow ``v_f * k_c``, veh/h."""
        return self.free_speed_kmh * self.critical_density

    def speed(self, density):
        """Speed (km/h) at ``density`` (veh/km), clamped to ``[v_min, v_f]``."""
        k = np.asarray(density, dtype=float)
        vf, kc, kj = self.free_speed_kmh, self.critical_density, self.jam_density
        with np.errstate(divide="ignore", invalid="ignore"):
            congested = vf * kc * (kj - k) / (k * (kj - kc))
        v = np.where(k <= kc, vf, congested)
        return np.clip(np.nan_to_num(v, nan=self.v_min, neginf=self.v_min), self.v_min, vf)


@dataclass(frozen=True)
class SurgeEvent:
    origins: tuple[int, ...]
    destinations: tuple[int, ...]
    start_slot: int
    duration: int
    intensity: float


@dataclass
class DemandModel:
    """Origin-destination demand in vehicles per slot.

    The rate of pair ``k`` at slot ``t`` is
    ``day_factor[day] * (base[k] * profile_base[t % L] + am[k] * profile_am[t % L]
    + pm[k] * profile_pm[t % L])`` plus any active surge.
    """

    od: np.ndarray                  # pairs x 2 intersection ids
    base: np.ndarray
    am: np.ndarray
    pm: np.ndarray
    profile_base: np.ndarray        # slots_per_week
    profile_am: np.ndarray
    profile_pm: np.ndarray
    day_factor: np.ndarray          # n_days
    surges: list[SurgeEvent] = field(default_factory=list)
    surge_unit: float = 180.0       # veh/slot at intensity 1, split over the event's OD pairs
    p_nav: float = 0.3

    def __post_init__(self):
        if not 0 < self.p_nav <= 1:
            raise ValueError("p_nav must lie in (0, 1]")
        for arr in (self.base, self.am, self.pm, self.profile_base, self.profile_am, self.profile_pm,
                    self.day_factor):
            if np.any(np.asarray(arr) < 0):
                raise ValueError("demand rates must be nonnegative")
        self._pair_index = {(int(o), int(d)): k for k, (o, d) in enumerate(self.od)}

    def rates(self, slot: int, slots_per_week: int, slots_per_day: int) -> np.ndarray:
        ph = slot % slots_per_week
        day = slot // slots_per_day
        return self.day_factor[day] * (self.base * self.profile_base[ph] + self.am * self.profile_am[ph]
                                       + self.pm * self.profile_pm[ph])

    def surge_rates(self, slot: int) -> np.ndarray:
        extra = np.zeros(len(self.od))
        for ev in self.surges:
            if ev.start_slot <= slot < ev.start_slot + ev.duration:
                pairs = [self._pair_index[(o, d)] for o in ev.origins for d in ev.destinations
                         if (o, d) in self._pair_index]
                if pairs:
                    extra[pairs] += ev.intensity * self.surge_unit / len(pairs)
        return extra


def _gauss(x, mu, sd):
    return np.exp(-0.5 * ((x - mu) / sd) ** 2)


def commute_profiles(grid: TimeGrid):
    """Weekly base / morning-inbound / evening-outbound multipliers."""
    hours = grid.day_start_hour + (np.arange(grid.slots_per_day) + 0.5) * grid.slot_minutes / 60.0
    wk_base = 0.45 + 0.35 * _gauss(hours, 13.0, 2.5) + 0.25 * _gauss(hours, 8.0, 1.0) + 0.25 * _gauss(hours, 18.0, 1.2)
    wk_am = _gauss(hours, 8.0, 0.8)
    wk_pm = _gauss(hours, 18.0, 0.9)
    we_base = 0.35 + 0.45 * _gauss(hours, 14.0, 3.0)
    zero = np.zeros_like(hours)
    base = np.concatenate([wk_base] * 5 + [we_base] * 2)
    am = np.concatenate([wk_am] * 5 + [zero] * 2)
    pm = np.concatenate([wk_pm] * 5 + [zero] * 2)
    return base, am, pm


def default_demand(net: RoadNetwork, grid: TimeGrid, seed=0, scale: float = 1.0, surges_per_week: float = 4.0,
                   surge_intensity=(2.0, 4.0), surge_duration=(4, 10), p_nav: float = 0.3,
                   day_sigma: float = 0.06) -> DemandModel:
    """Gravity-style demand with a commute pattern toward a central district."""
    rng = np.random.default_rng(seed)
    m = net.n_nodes
    xy = net.node_xy
    center = xy.mean(axis=0)
    dist_c = np.hypot(*(xy - center).T)
    cbd = dist_c <= np.quantile(dist_c, 0.3)
    mass = rng.uniform(0.6, 1.4, size=m)
    od = np.array([(o, d) for o in range(m) for d in range(m)
                   if o != d and np.hypot(*(xy[o] - xy[d])) > 0.6 * np.median(np.hypot(*(xy[1:] - xy[0]).T))])
    o, d = od[:, 0], od[:, 1]
    base = mass[o] * mass[d]
    base *= 1.0 / base.sum()
    am = base * np.where(cbd[d] & ~cbd[o], 1.0, 0.0)
    pm = base * np.where(cbd[o] & ~cbd[d], 1.0, 0.0)
    am *= 1.0 / max(am.sum(), 1e-12)
    pm *= 1.0 / max(pm.sum(), 1e-12)
    # vehicles per slot network-wide at a profile multiplier of 1
    total = 660.0 * scale * m / 16.0
    pb, pa, pp = commute_profiles(grid)
    day_factor = np.exp(rng.normal(0.0, day_sigma, size=grid.n_days))

    surges = []
    spd = grid.slots_per_day
    n_events = rng.poisson(surges_per_week * grid.n_days / 7.0)
    for _ in range(n_events):
        hub = int(rng.integers(m))
        near = np.argsort(np.hypot(*(xy - xy[hub]).T))
        origins = tuple(sorted(int(v) for v in near[:2]))
        far = [int(v) for v in near[::-1] if int(v) not in origins]
        dests = tuple(sorted(rng.choice(far[:max(3, m // 2)], size=2, replace=False).tolist()))
        day = int(rng.integers(grid.n_days))
        dur = int(rng.integers(surge_duration[0], surge_duration[1] + 1))
        start = day * spd + int(rng.integers(6, spd - dur - 12))
        surges.append(SurgeEvent(origins, dests, start, dur, float(rng.uniform(*surge_intensity))))
    surges.sort(key=lambda e: e.start_slot)
    return DemandModel(od, total * base, total * 0.9 * am, total * 0.8 * pm, pb, pa, pp, day_factor, surges,
                       surge_unit=180.0 * scale, p_nav=p_nav)


# ---------------------------------------------------------------- routing
class Router:
    """Minimum-travel-time paths on the intersection graph."""

    def __init__(self, net: RoadNetwork):
        self.net = net
        self.seg_of = {(int(t), int(h)): i for i, (t, h) in enumerate(zip(net.tail, net.head))}

    def tree(self, tau, origins):
        """Predecessor arrays for each origin under per-segment travel time ``tau`` (s/m)."""
        net = self.net
        w = np.asarray(tau) * net.length_m
        g = csr_matrix((w, (net.tail, net.head)), shape=(net.n_nodes, net.n_nodes))
        dist, pred = dijkstra(g, directed=True, indices=origins, return_predecessors=True)
        return dist, pred

    def path(self, pred_row, origin, destination):
        nodes = [destination]
        while nodes[-1] != origin:
            p = pred_row[nodes[-1]]
            if p < 0:
                raise ValueError(f"destination {destination} unreachable from {origin}")
            nodes.append(int(p))
        nodes.reverse()
        return np.array([self.seg_of[(a, b)] for a, b in zip(nodes[:-1], nodes[1:])], dtype=np.int64)


def plan_route(net: RoadNetwork, tau, origin: int, destination: int, launch_time: float,
               slot_seconds: float = 300.0, route_id: int = 0, router: Router | None = None):
    """Route record ``(route_id, launch_slot, [(segment, eta_slot), ...])``.

    ``launch_time`` is in seconds on the slot axis; ETAs accumulate
    ``tau * length`` along the minimum-travel-time path and are floored to slots.
    """
    if origin == destination:
        raise ValueError("origin and destination coincide")
    router = router or Router(net)
    _, pred = router.tree(tau, [origin])
    segs = router.path(pred[0], origin, destination)
    trav = np.asarray(tau)[segs] * net.length_m[segs]
    entry = launch_time + np.concatenate([[0.0], np.cumsum(trav)[:-1]])
    slots = np.floor(entry / slot_seconds).astype(np.int64)
    return route_id, int(np.floor(launch_time / slot_seconds)), list(zip(segs.tolist(), slots.tolist()))


# ------------------------------------------------------------- simulation
@dataclass
class SimResult:
    travel_time: np.ndarray       # n x slots, s/m
    volume: np.ndarray            # n x slots, vehicles entering
    nav_volume: np.ndarray        # n x slots, navigation vehicles entering
    log: NavigationLog
    spawned: np.ndarray           # per slot
    arrived: np.ndarray
    in_flight: np.ndarray         # at slot end, after the day-end flush
    flushed: np.ndarray           # removed at the end of each day

    def conservation_residual(self) -> np.ndarray:
        """``spawned - (in-flight delta + arrived + flushed)`` per slot; zero when consistent."""
        prev = np.concatenate([[0], self.in_flight[:-1]])
        return self.spawned - (self.in_flight - prev + self.arrived + self.flushed)


class _HopBuffer:
    def __init__(self, cap=1 << 14):
        self.seg = np.empty(cap, dtype=np.int64)
        self.trav = np.empty(cap)
        self.size = 0

    def append(self, seg, trav):
        need = self.size + len(seg)
        if need > len(self.seg):
            cap = max(need, 2 * len(self.seg))
            self.seg = np.resize(self.seg, cap)
            self.trav = np.resize(self.trav, cap)
        self.seg[self.size:need] = seg
        self.trav[self.size:need] = trav
        start = self.size
        self.size = need
        return start


def propagate_traffic(net: RoadNetwork, demand: DemandModel, fd: FundamentalDiagram, grid: TimeGrid,
                      seed=0, days=None, follow_plan: bool = False) -> SimResult:
    """Simulate ``days`` (default: every day of ``grid``) and log planned routes.

    With ``follow_plan`` every vehicle traverses each hop in exactly its
    planned time, so realised entry slots equal the logged ETAs.
    """
    days = range(grid.n_days) if days is None else days
    spd, L, dt = grid.slots_per_day, grid.slots_per_week, grid.slot_seconds
    n, S = net.n, grid.n_slots
    tau_out = np.tile(net.free_flow_tau()[:, None], (1, S))
    vol = np.zeros((n, S), dtype=np.int64)
    nav_vol = np.zeros((n, S), dtype=np.int64)
    spawned = np.zeros(S, dtype=np.int64)
    arrived = np.zeros(S, dtype=np.int64)
    in_flight = np.zeros(S, dtype=np.int64)
    flushed = np.zeros(S, dtype=np.int64)
    router = Router(net)
    length_km = net.length_m / 1000.0
    log_parts = []
    next_route = 0
    golden = (np.sqrt(5.0) - 1.0) / 2.0

    for day in days:
        rng = np.random.default_rng([seed, day])
        surge_u = np.random.default_rng([seed, day, 1])
        hops = _HopBuffer()
        # per-vehicle state
        v_ptr = np.empty(0, dtype=np.int64)
        v_len = np.empty(0, dtype=np.int64)
        v_pos = np.empty(0, dtype=np.int64)
        v_rem = np.empty(0)
        v_nav = np.empty(0, dtype=bool)
        speed = fd.free_speed_kmh.copy()
        for k in range(spd):
            t = day * spd + k
            tau = 3.6 / speed
            tau_out[:, t] = tau
            # spawn
            base_counts = rng.poisson(demand.rates(t, L, spd))
            base_offsets = rng.uniform(0.0, dt, size=base_counts.sum())
            base_nav = rng.random(base_counts.sum()) < demand.p_nav
            surge_rate = demand.surge_rates(t)
            u = surge_u.random(len(surge_rate))
            surge_counts = np.where(surge_rate > 0, poisson.ppf(u, np.maximum(surge_rate, 1e-300)), 0).astype(np.int64)
            counts = base_counts + surge_counts
            active_pairs = np.flatnonzero(counts)
            new_ptr, new_len, new_off, new_nav = [], [], [], []
            if len(active_pairs):
                used_o = np.unique(demand.od[active_pairs, 0])
                _, pred = router.tree(tau, used_o)
                row = {int(o): r for r, o in enumerate(used_o)}
                b_cursor = np.concatenate([[0], np.cumsum(base_counts)])
                for p in active_pairs:
                    o, d = int(demand.od[p, 0]), int(demand.od[p, 1])
                    segs = router.path(pred[row[o]], o, d)
                    trav = tau[segs] * net.length_m[segs]
                    start = hops.append(segs, trav)
                    nb, ns = int(base_counts[p]), int(surge_counts[p])
                    offs = base_offsets[b_cursor[p]:b_cursor[p + 1]]
                    navs = base_nav[b_cursor[p]:b_cursor[p + 1]]
                    if ns:
                        j = np.arange(ns)
                        offs = np.concatenate([offs, ((j + 0.5) * golden % 1.0) * dt])
                        navs = np.concatenate([navs, ((p * 7 + j + 1) * golden) % 1.0 < demand.p_nav])
                    cnt = nb + ns
                    new_ptr.append(np.full(cnt, start))
                    new_len.append(np.full(cnt, len(segs)))
                    new_off.append(offs)
                    new_nav.append(navs)
            if new_ptr:
                n_ptr = np.concatenate(new_ptr)
                n_len = np.concatenate(new_len)
                n_off = np.concatenate(new_off)
                n_nav = np.concatenate(new_nav).astype(bool)
                spawned[t] = len(n_ptr)
                # navigation records: planned entry times from launch
                nav_idx = np.flatnonzero(n_nav)
                if len(nav_idx):
                    log_parts.append(_log_records(hops, n_ptr[nav_idx], n_len[nav_idx], n_off[nav_idx], t, day, spd,
                                                  dt, next_route))
                    next_route += len(nav_idx)
            else:
                n_ptr = np.empty(0, dtype=np.int64)
                n_len = n_ptr.copy()
                n_off = np.empty(0)
                n_nav = np.empty(0, dtype=bool)
            n_before = len(v_ptr)
            v_ptr = np.concatenate([v_ptr, n_ptr])
            v_len = np.concatenate([v_len, n_len])
            v_pos = np.concatenate([v_pos, np.zeros(len(n_ptr), dtype=np.int64)])
            v_rem = np.concatenate([v_rem, np.ones(len(n_ptr))])
            v_nav = np.concatenate([v_nav, n_nav])
            clock = np.concatenate([np.zeros(n_before), n_off])
            # first-hop entries of new vehicles
            first = hops.seg[n_ptr]
            np.add.at(vol[:, t], first, 1)
            np.add.at(nav_vol[:, t], first[n_nav], 1)

            occ = np.zeros(n)
            live_trav = net.length_m / (speed / 3.6)
            done = np.zeros(len(v_ptr), dtype=bool)
            idx = np.arange(len(v_ptr))
            while len(idx):
                h = v_ptr[idx] + v_pos[idx]
                seg = hops.seg[h]
                trav = hops.trav[h] if follow_plan else live_trav[seg]
                need = v_rem[idx] * trav
                left = dt - clock[idx]
                fin = need < left
                np.add.at(occ, seg, np.where(fin, need, left))
                stay = idx[~fin]
                v_rem[stay] -= left[~fin] / trav[~fin]
                go = idx[fin]
                clock[go] += need[fin]
                v_pos[go] += 1
                v_rem[go] = 1.0
                end = v_pos[go] >= v_len[go]
                done[go[end]] = True
                moving = go[~end]
                nxt = hops.seg[v_ptr[moving] + v_pos[moving]]
                np.add.at(vol[:, t], nxt, 1)
                np.add.at(nav_vol[:, t], nxt[v_nav[moving]], 1)
                idx = moving
            arrived[t] = int(done.sum())
            keep = ~done
            v_ptr, v_len, v_pos, v_rem, v_nav = v_ptr[keep], v_len[keep], v_pos[keep], v_rem[keep], v_nav[keep]
            in_flight[t] = len(v_ptr)
            density = occ / dt / length_km
            speed = fd.speed(density)
        # vehicles still travelling at 22:00 leave the simulation
        last = day * spd + spd - 1
        flushed[last], in_flight[last] = in_flight[last], 0

    log = NavigationLog.empty()
    if log_parts:
        log = NavigationLog(*(np.concatenate([p[i] for p in log_parts]) for i in range(2)),
                            _concat_ptr([p[2] for p in log_parts]),
                            *(np.concatenate([p[i] for p in log_parts]) for i in range(3, 5)))
    return SimResult(tau_out, vol, nav_vol, log, spawned, arrived, in_flight, flushed)


def _concat_ptr(ptrs):
    out = [np.zeros(1, dtype=np.int64)]
    offset = 0
    for p in ptrs:
        out.append(p[1:] + offset)
        offset += p[-1]
    return np.concatenate(out)


def _log_records(hops, ptr, length, offset, t, day, spd, dt, first_id):
    """Columnar records for vehicles launched at slot ``t``; hops after 22:00 are cut."""
    k = t - day * spd
    rep = np.repeat(np.arange(len(ptr)), length)
    starts = np.cumsum(length) - length
    pos = np.arange(len(rep)) - np.repeat(starts, length)
    h = ptr[rep] + pos
    trav = hops.trav[h]
    # entry time of hop l = launch + sum of planned times of hops < l
    cum = np.cumsum(trav)
    cum_before = cum - trav - np.repeat(cum[starts] - trav[starts], length)
    entry = k * dt + offset[rep] + cum_before
    slot_in_day = np.floor(entry / dt).astype(np.int64)
    inside = slot_in_day < spd
    counts = np.bincount(rep[inside], minlength=len(ptr))
    ptr_out = np.concatenate([[0], np.cumsum(counts)])
    route_id = first_id + np.arange(len(ptr))
    launch = np.full(len(ptr), t, dtype=np.int64)
    return route_id, launch, ptr_out, hops.seg[h][inside], day * spd + slot_in_day[inside]
