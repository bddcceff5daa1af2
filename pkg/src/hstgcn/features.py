"""Model inputs from raw series and navigation logs.

Slots are indexed globally over the in-window part of each day: slot
``d * slots_per_day + k`` is the ``k``-th 5-minute slot after 06:00 on day
``d``. Weeks are ``7 * slots_per_day`` slots long.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TimeGrid:
    slot_minutes: int = 5
    day_start_hour: int = 6
    day_end_hour: int = 22
    weeks_train: int = 8
    weeks_test: int = 2

    @property
    def slots_per_day(self) -> int:
        return (self.day_end_hour - self.day_start_hour) * 60 // self.slot_minutes

    @property
    def slots_per_week(self) -> int:
        return 7 * self.slots_per_day

    @property
    def s_train(self) -> int:
        return self.weeks_train * self.slots_per_week

    @property
    def s_test(self) -> int:
        return self.weeks_test * self.slots_per_week

    @property
    def n_slots(self) -> int:
        return self.s_train + self.s_test

    @property
    def n_days(self) -> int:
        return 7 * (self.weeks_train + self.weeks_test)

    @property
    def slot_seconds(self) -> float:
        return 60.0 * self.slot_minutes

    def day_of(self, slot):
        return np.asarray(slot) // self.slots_per_day


# --------------------------------------------------------------- historical avg
def historical_average_table(series: np.ndarray, grid: TimeGrid, literal: bool = False) -> np.ndarray:
    """Weekly-periodic mean over the training range for every slot.

    Slots inside the training range exclude themselves. By default the
    divisor is the number of terms actually summed; ``literal=True`` always
    divides by the number of training weeks.
    """
    x = np.asarray(series, dtype=float)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    L, W = grid.slots_per_week, grid.weeks_train
    if W < 1:
        raise ValueError("training range is empty")
    if x.shape[1] < grid.s_train:
        raise ValueError("series shorter than the training range")
    weekly = x[:, :grid.s_train].reshape(x.shape[0], W, L).sum(axis=1)
    n_total = x.shape[1]
    phase = np.arange(n_total) % L
    totals = weekly[:, phase]
    in_train = np.arange(n_total) < grid.s_train
    sums = np.where(in_train, totals - x, totals)
    if literal:
        out = sums / W
    else:
        if W == 1 and np.any(in_train):
            raise ValueError("no qualifying slots: one training week and t inside it")
        counts = np.where(in_train, W - 1, W)
        out = sums / counts
    return out[0] if squeeze else out


def historical_average(series: np.ndarray, grid: TimeGrid, t: int, literal: bool = False):
    """Historical average at slot ``t``; ``series`` is (slots,) or (segments, slots)."""
    x = np.asarray(series, dtype=float)
    L = grid.slots_per_week
    rs = np.arange(t % L, grid.s_train, L)
    rs = rs[rs != t]
    if len(rs) == 0:
        raise ValueError(f"no qualifying training slots for t={t}")
    total = x[..., rs].sum(axis=-1)
    return total / (grid.weeks_train if literal else len(rs))


# ---------------------------------------------------------------- navigation
class NavigationLog:
    """Planned routes in columnar (CSR) form.

    Record ``r`` has launch slot ``launch[r]`` and hops
    ``hop_segment[ptr[r]:ptr[r+1]]`` with ETA slots ``hop_slot[...]``.
    """

    def __init__(self, route_id, launch, ptr, hop_segment, hop_slot):
        self.route_id = np.asarray(route_id, dtype=np.int64)
        self.launch = np.asarray(launch, dtype=np.int64)
        self.ptr = np.asarray(ptr, dtype=np.int64)
        self.hop_segment = np.asarray(hop_segment, dtype=np.int64)
        self.hop_slot = np.asarray(hop_slot, dtype=np.int64)
        if len(self.ptr) != len(self.launch) + 1 or len(self.route_id) != len(self.launch):
            raise ValueError("inconsistent record arrays")
        if self.ptr[0] != 0 or self.ptr[-1] != len(self.hop_segment) or len(self.hop_slot) != len(self.hop_segment):
            raise ValueError("inconsistent hop arrays")

    @classmethod
    def from_records(cls, records):
        """``records``: iterable of ``(route_id, launch, [(segment, slot), ...])``."""
        rid, launch, ptr, seg, slot = [], [], [0], [], []
        for r, psi, hops in records:
            rid.append(r)
            launch.append(psi)
            for s, d in hops:
                seg.append(s)
                slot.append(d)
            ptr.append(len(seg))
        return cls(rid, launch, ptr, seg, slot)

    @classmethod
    def empty(cls):
        return cls([], [], [0], [], [])

    def __len__(self):
        return len(self.launch)

    @property
    def n_hops(self) -> int:
        return len(self.hop_segment)

    def hop_counts(self):
        return np.diff(self.ptr)

    def hop_launch(self):
        return np.repeat(self.launch, self.hop_counts())

    def records(self):
        for r in range(len(self)):
            a, b = self.ptr[r], self.ptr[r + 1]
            yield int(self.route_id[r]), int(self.launch[r]), list(zip(self.hop_segment[a:b].tolist(),
                                                                      self.hop_slot[a:b].tolist()))

    def validate(self, n: int):
        if np.any((self.hop_segment < 0) | (self.hop_segment >= n)):
            raise ValueError("hop references an unknown segment")
        steps = np.diff(self.hop_slot)
        same_route = np.diff(np.repeat(np.arange(len(self)), self.hop_counts())) == 0
        if np.any(steps[same_route] < 0):
            raise ValueError("ETA slots decrease along a route")
        first = self.ptr[:-1][self.hop_counts() > 0]
        if np.any(self.hop_slot[first] < self.launch[self.hop_counts() > 0]):
            raise ValueError("first ETA precedes launch")

    def concat(self, other: "NavigationLog") -> "NavigationLog":
        return NavigationLog(np.r_[self.route_id, other.route_id], np.r_[self.launch, other.launch],
                             np.r_[self.ptr, other.ptr[1:] + self.ptr[-1]],
                             np.r_[self.hop_segment, other.hop_segment], np.r_[self.hop_slot, other.hop_slot])


@dataclass
class VolumeCube:
    nu: np.ndarray          # segments x slots x (F + 1)
    skipped_hops: int = 0


def aggregate_routes(log: NavigationLog, n_slots: int, n: int, F: int, chunk: int = 1 << 20) -> VolumeCube:
    """Ideal future volume: count of (segment, slot, lead) triples over all hops.

    A hop arriving at slot ``d`` of a route launched at ``psi`` contributes to
    ``(s, d - f, f)`` for ``f = 0..F`` while ``d - f >= psi``. Hops whose ETA
    lies outside ``[0, n_slots)`` are skipped and counted.
    """
    seg, eta = log.hop_segment, log.hop_slot
    psi = log.hop_launch()
    ok = (eta >= 0) & (eta < n_slots) & (eta >= psi)
    skipped = int(np.count_nonzero((eta < 0) | (eta >= n_slots)))
    seg, eta, psi = seg[ok], eta[ok], psi[ok]
    nu = np.zeros(n * n_slots * (F + 1), dtype=np.int64)
    for lo in range(0, len(seg), chunk):
        s, d, p = seg[lo:lo + chunk], eta[lo:lo + chunk], psi[lo:lo + chunk]
        reach = np.minimum(F, d - np.maximum(p, 0)) + 1
        rep = np.repeat(np.arange(len(s)), reach)
        starts = np.cumsum(reach) - reach
        f = np.arange(len(rep)) - np.repeat(starts, reach)
        flat = (s[rep] * n_slots + d[rep] - f) * (F + 1) + f
        nu += np.bincount(flat, minlength=nu.size)
    nu = nu.reshape(n, n_slots, F + 1)
    return VolumeCube(nu, skipped)


# ------------------------------------------------------------------- windows
@dataclass
class FeatureTensorPair:
    V: np.ndarray       # [batch x] n x P x 2(F+1)
    T: np.ndarray       # [batch x] n x P x (F+2)
    anchor: np.ndarray
    label: np.ndarray   # [batch x] n x F


def _window_checks(t0, P, F, n_slots):
    t0 = np.atleast_1d(np.asarray(t0, dtype=np.int64))
    if np.any(t0 - P + 1 < 0) or np.any(t0 + F >= n_slots):
        raise ValueError(f"window [t0-{P - 1}, t0+{F}] leaves the grid")
    return t0


def build_feature_window(nu, travel_time, ha_volume, ha_time, t0, P=6, F=12) -> FeatureTensorPair:
    """V and T tensors for anchor slot(s) ``t0``.

    ``nu`` is segments x slots x (F+1); ``ha_volume`` is the historical
    average of ``nu[..., 0]``. A scalar ``t0`` yields unbatched tensors.
    """
    scalar = np.ndim(t0) == 0
    n, n_slots = travel_time.shape
    if nu.shape[2] < F + 1:
        raise ValueError(f"volume cube has {nu.shape[2]} leads, need {F + 1}")
    t0 = _window_checks(t0, P, F, n_slots)
    ts = t0[:, None] + np.arange(-P + 1, 1)[None, :]                       # B x P
    leads = ts[:, :, None] + np.arange(F + 1)[None, None, :]               # B x P x (F+1)
    vol = nu[:, ts, :F + 1]                                                # n x B x P x (F+1)
    vol_ha = ha_volume[:, leads]                                           # n x B x P x (F+1)
    tau = travel_time[:, ts][..., None]                                    # n x B x P x 1
    tau_ha = ha_time[:, leads]
    V = np.concatenate([vol, vol_ha], axis=-1).transpose(1, 0, 2, 3).astype(float)
    T = np.concatenate([tau, tau_ha], axis=-1).transpose(1, 0, 2, 3).astype(float)
    label = travel_time[:, t0[:, None] + np.arange(1, F + 1)[None, :]].transpose(1, 0, 2)
    if scalar:
        return FeatureTensorPair(V[0], T[0], t0[0], label[0])
    return FeatureTensorPair(V, T, t0, label)


def inject_noise(V: np.ndarray, threshold: float = 3.0, std: float = 0.3, rng=None) -> np.ndarray:
    """Add clamped Gaussian noise to entries below ``threshold``."""
    if std <= 0:
        raise ValueError("noise std must be positive")
    rng = np.random.default_rng(rng)
    noise = rng.normal(0.0, std, size=V.shape)
    low = V < threshold
    return np.where(low, np.maximum(V + noise, 0.0), V)


def valid_anchors(grid: TimeGrid, P: int, F: int, start: int, stop: int) -> np.ndarray:
    """Anchors whose full window sits inside one day and inside [start, stop)."""
    spd = grid.slots_per_day
    k = np.arange(P - 1, spd - F)
    days = np.arange(grid.n_days)
    t0 = (days[:, None] * spd + k[None, :]).ravel()
    keep = (t0 - P + 1 >= start) & (t0 + F < stop)
    return t0[keep]


def window_sampler(grid: TimeGrid, P: int = 6, F: int = 12, mode: str = "train", seed=0,
                   span: tuple[int, int] | None = None) -> np.ndarray:
    """Anchor slots: shuffled over the training span, or in order over the test span."""
    if mode == "train":
        lo, hi = span or (0, grid.s_train)
        anchors = valid_anchors(grid, P, F, lo, hi)
        return np.random.default_rng(seed).permutation(anchors)
    if mode == "test":
        lo, hi = span or (grid.s_train, grid.n_slots)
        return valid_anchors(grid, P, F, lo, hi)
    raise ValueError(f"unknown mode {mode!r}")


def impute_travel_time(tau: np.ndarray, free_flow_tau: np.ndarray) -> np.ndarray:
    """Fill NaNs by carrying the last observation forward, else free-flow."""
    tau = np.array(tau, dtype=float)
    n, S = tau.shape
    idx = np.where(np.isfinite(tau), np.arange(S)[None, :], -1)
    np.maximum.accumulate(idx, axis=1, out=idx)
    filled = np.take_along_axis(tau, np.maximum(idx, 0), axis=1)
    return np.where(idx >= 0, filled, np.asarray(free_flow_tau, dtype=float)[:, None])


# ------------------------------------------------------------- feature store
@dataclass
class FeatureStore:
    """Everything the windows are cut from, for one dataset."""

    grid: TimeGrid
    P: int
    F: int
    nu: np.ndarray              # n x slots x (F+1)
    travel_time: np.ndarray     # n x slots
    ha_volume: np.ndarray       # n x slots, HA of nu[..., 0]
    ha_time: np.ndarray         # n x slots
    skipped_hops: int = 0

    @property
    def n(self) -> int:
        return self.travel_time.shape[0]

    @property
    def v_channels(self) -> int:
        return 2 * (self.F + 1)

    @property
    def t_channels(self) -> int:
        return self.F + 2

    def window(self, t0) -> FeatureTensorPair:
        return build_feature_window(self.nu, self.travel_time, self.ha_volume, self.ha_time, t0, self.P, self.F)

    def anchors(self, mode: str, seed=0, span=None) -> np.ndarray:
        return window_sampler(self.grid, self.P, self.F, mode, seed, span)


def build_feature_store(travel_time, log: NavigationLog, grid: TimeGrid, P: int = 6, F: int = 12,
                        literal_ha: bool = False) -> FeatureStore:
    tau = np.asarray(travel_time, dtype=float)
    n, S = tau.shape
    if S != grid.n_slots:
        raise ValueError(f"series has {S} slots, the time grid has {grid.n_slots}")
    if not np.all(np.isfinite(tau)):
        raise ValueError("travel-time series has gaps; impute first")
    log.validate(n)
    cube = aggregate_routes(log, S, n, F)
    ha_v = historical_average_table(cube.nu[..., 0], grid, literal_ha)
    ha_t = historical_average_table(tau, grid, literal_ha)
    return FeatureStore(grid, P, F, cube.nu, tau, ha_v, ha_t, cube.skipped_hops)
