"""Directed road-segment networks and synthetic network generators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROAD_CLASSES = ("freeway", "highway", "expressway", "major")

# free-flow speed (km/h) per class
FREE_FLOW_KMH = {"freeway": 100.0, "highway": 80.0, "expressway": 70.0, "major": 50.0}


@dataclass
class RoadNetwork:
    """Segments are directed edges ``tail -> head`` between intersections.

    Segment ``j`` succeeds segment ``i`` when ``tail[j] == head[i]``; an
    immediate U-turn is only allowed at dead ends.
    """

    length_m: np.ndarray
    road_class: tuple[str, ...]
    free_speed_kmh: np.ndarray
    tail: np.ndarray
    head: np.ndarray
    node_xy: np.ndarray
    successors: list[list[int]] = field(default=None, repr=False)

    def __post_init__(self):
        self.length_m = np.asarray(self.length_m, dtype=float)
        self.free_speed_kmh = np.asarray(self.free_speed_kmh, dtype=float)
        self.tail = np.asarray(self.tail, dtype=int)
        self.head = np.asarray(self.head, dtype=int)
        self.node_xy = np.asarray(self.node_xy, dtype=float)
        self.road_class = tuple(self.road_class)
        n = len(self.length_m)
        if not (len(self.road_class) == len(self.free_speed_kmh) == len(self.tail) == len(self.head) == n):
            raise ValueError("segment attribute arrays differ in length")
        if n == 0:
            raise ValueError("network has no segments")
        if np.any(self.length_m <= 0):
            raise ValueError("segment lengths must be positive")
        if np.any(self.free_speed_kmh <= 0):
            raise ValueError("free-flow speeds must be positive")
        bad = set(self.road_class) - set(ROAD_CLASSES)
        if bad:
            raise ValueError(f"unknown road class(es): {sorted(bad)}")
        m = len(self.node_xy)
        if np.any((self.tail < 0) | (self.tail >= m) | (self.head < 0) | (self.head >= m)):
            raise ValueError("segment endpoints reference unknown intersections")
        if self.successors is None:
            self.successors = self._derive_successors()
        for i, succ in enumerate(self.successors):
            if any(not 0 <= j < n for j in succ):
                raise ValueError(f"segment {i} has successor outside 0..{n - 1}")

    @property
    def n(self) -> int:
        return len(self.length_m)

    @property
    def n_nodes(self) -> int:
        return len(self.node_xy)

    def _derive_successors(self):
        out_of = [[] for _ in range(self.n_nodes)]
        for j, t in enumerate(self.tail):
            out_of[t].append(j)
        succ = []
        for i in range(self.n):
            cands = out_of[self.head[i]]
            no_uturn = [j for j in cands if self.head[j] != self.tail[i]]
            succ.append(sorted(no_uturn if no_uturn else cands))
        return succ

    def free_flow_tau(self) -> np.ndarray:
        """Free-flow travel time per unit length, s/m."""
        return 3.6 / self.free_speed_kmh

    def is_strongly_connected(self) -> bool:
        from scipy.sparse import csr_matrix
        from scipy.sparse.csgraph import connected_components

        rows = [i for i, s in enumerate(self.successors) for _ in s]
        cols = [j for s in self.successors for j in s]
        adj = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n, self.n))
        ncomp, _ = connected_components(adj, directed=True, connection="strong")
        return ncomp == 1


def _assign_line_classes(n_lines, rng):
    """Perimeter lines are major roads; interior lines mix the faster classes."""
    classes = ["major"] * n_lines
    interior = list(range(1, n_lines - 1))
    palette = ["expressway", "freeway", "highway"]
    order = rng.permutation(len(interior))
    for rank, k in enumerate(order):
        classes[interior[k]] = palette[rank % len(palette)]
    return classes


def generate_network(kind: str = "grid", n_target: int = 48, seed: int = 0,
                     spacing_m: float = 1200.0, jitter: float = 0.15) -> RoadNetwork:
    """Connected directed network with about ``n_target`` segments.

    ``grid``: an r x r two-way lattice, 4 r (r - 1) segments.
    ``ring-radial``: k ring nodes around a hub, two-way ring and spokes, 4 k segments.
    """
    rng = np.random.default_rng(seed)
    if kind == "grid":
        if n_target < 8:
            raise ValueError(f"grid networks need n_target >= 8, got {n_target}")
        r = max(2, int(round(0.5 + np.sqrt(0.25 + n_target / 4.0))))
        xy = np.array([(c, row) for row in range(r) for c in range(r)], dtype=float) * spacing_m
        xy += rng.uniform(-jitter, jitter, size=xy.shape) * spacing_m
        row_cls = _assign_line_classes(r, rng)
        col_cls = _assign_line_classes(r, rng)
        links = []
        for row in range(r):
            for c in range(r - 1):
                links.append((row * r + c, row * r + c + 1, row_cls[row]))
        for c in range(r):
            for row in range(r - 1):
                links.append((row * r + c, (row + 1) * r + c, col_cls[c]))
    elif kind == "ring-radial":
        if n_target < 12:
            raise ValueError(f"ring-radial networks need n_target >= 12, got {n_target}")
        k = max(3, int(round(n_target / 4.0)))
        ang = 2 * np.pi * np.arange(k) / k
        radius = spacing_m * k / (2 * np.pi)
        xy = np.vstack([[0.0, 0.0], np.c_[np.cos(ang), np.sin(ang)] * radius])
        xy[1:] += rng.uniform(-jitter, jitter, size=(k, 2)) * spacing_m
        links = [(1 + i, 1 + (i + 1) % k, "expressway") for i in range(k)]
        spoke = rng.permutation(["freeway", "highway", "major"] * k)[:k]
        links += [(0, 1 + i, str(spoke[i])) for i in range(k)]
    else:
        raise ValueError(f"unknown network kind {kind!r}")

    tail, head, cls, length = [], [], [], []
    for a, b, c in links:
        d = float(np.hypot(*(xy[a] - xy[b]))) * rng.uniform(1.0, 1.15)
        for u, v in ((a, b), (b, a)):
            tail.append(u)
            head.append(v)
            cls.append(c)
            length.append(round(d, 1))
    speed = [FREE_FLOW_KMH[c] for c in cls]
    return RoadNetwork(np.array(length), tuple(cls), np.array(speed), np.array(tail), np.array(head), xy)
