"""Metrics, congestion slicing, the historical-average baseline and reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .features import TimeGrid
from .network import ROAD_CLASSES, RoadNetwork

CONGESTION_KMH = {"freeway": 30.0, "highway": 20.0, "expressway": 20.0, "major": 12.0}
SLICE_KINDS = ("full", "C", "NRC")
METRICS = ("MAE", "MAPE", "RMSE")


def compute_metrics(pred, truth, mask=None, mape_max_kmh: float = 120.0, mape_min_tau: float = 1e-4):
    """``(MAE, MAPE %, RMSE)`` over the entries selected by ``mask``.

    MAPE skips entries whose true speed exceeds ``mape_max_kmh`` or whose
    true travel time is below ``mape_min_tau``; it is NaN when all are skipped.
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    mask = np.ones(truth.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), truth.shape)
    if not mask.any():
        raise ValueError("mask selects no samples")
    p, t = pred[mask], truth[mask]
    err = p - t
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    ok = (t >= mape_min_tau) & (3.6 / np.where(t > 0, t, np.inf) <= mape_max_kmh)
    mape = float(100.0 * np.mean(np.abs(err[ok]) / t[ok])) if ok.any() else float("nan")
    return mae, mape, rmse


# ------------------------------------------------------------------- slicing
@dataclass(frozen=True)
class SliceSpec:
    high_volume_per_min: float = 10.0
    congestion_kmh: dict = field(default_factory=lambda: dict(CONGESTION_KMH))
    nrc_fraction: float = 0.5
    extension: int = 12
    min_nrc_run: int = 2

    def __post_init__(self):
        if self.high_volume_per_min <= 0 or self.nrc_fraction <= 0 or self.min_nrc_run < 1:
            raise ValueError("slice thresholds must be positive")
        if any(v <= 0 for v in self.congestion_kmh.values()):
            raise ValueError("congestion speed thresholds must be positive")
        if self.extension < 0:
            raise ValueError("extension must be >= 0")


@dataclass
class SliceLabels:
    high_volume: np.ndarray     # n
    congested: np.ndarray       # n x S, before extension
    nrc: np.ndarray             # n x S, before extension
    C: np.ndarray               # n x S, extended, high-volume segments only
    NRC: np.ndarray

    def mask(self, kind: str) -> np.ndarray:
        if kind == "full":
            return np.ones_like(self.C)
        if kind in ("C", "NRC"):
            return getattr(self, kind)
        raise ValueError(f"unknown slice {kind!r}")


def _runs(flags: np.ndarray, min_len: int) -> np.ndarray:
    """Keep only maximal True runs (along the last axis) of length >= ``min_len``."""
    if min_len <= 1:
        return flags.copy()
    out = np.zeros_like(flags)
    for idx in np.ndindex(flags.shape[:-1]):
        row = flags[idx].astype(np.int8)
        edges = np.diff(np.concatenate([[0], row, [0]]))
        for a, b in zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)):
            if b - a >= min_len:
                out[idx + (slice(a, b),)] = True
    return out


def _extend(flags: np.ndarray, k: int) -> np.ndarray:
    """Dilate True slots by ``k`` on both sides along the last axis (union)."""
    if k == 0:
        return flags.copy()
    length = flags.shape[-1]
    c = np.concatenate([np.zeros(flags.shape[:-1] + (1,), dtype=np.int64), np.cumsum(flags, axis=-1)], axis=-1)
    i = np.arange(length)
    lo, hi = np.maximum(i - k, 0), np.minimum(i + k + 1, length)
    return (c[..., hi] - c[..., lo]) > 0


def classify_slices(tau: np.ndarray, ha_tau: np.ndarray, volume: np.ndarray, net: RoadNetwork,
                    spec: SliceSpec | None = None, grid: TimeGrid | None = None) -> SliceLabels:
    """Congested (C) and non-recurring congested (NRC) labels per segment and slot.

    Runs and extensions never cross a day boundary. High-volume segments are
    those whose mean volume over the training range reaches the threshold.
    """
    spec = spec or SliceSpec()
    grid = grid or TimeGrid()
    tau = np.asarray(tau, dtype=float)
    n, S = tau.shape
    if S % grid.slots_per_day:
        raise ValueError("series length is not a whole number of days")
    unknown = set(net.road_class) - set(spec.congestion_kmh)
    if unknown or set(net.road_class) - set(ROAD_CLASSES):
        raise ValueError(f"no congestion threshold for road class(es) {sorted(unknown)}")
    per_min = np.asarray(volume, dtype=float)[:, :min(grid.s_train, S)].mean(axis=1) / grid.slot_minutes
    high = per_min >= spec.high_volume_per_min
    speed = 3.6 / tau
    ha_speed = 3.6 / np.asarray(ha_tau, dtype=float)
    thresh = np.array([spec.congestion_kmh[c] for c in net.road_class])
    congested = speed < thresh[:, None]
    below = speed < spec.nrc_fraction * ha_speed

    days = (n, S // grid.slots_per_day, grid.slots_per_day)
    nrc = _runs(below.reshape(days), spec.min_nrc_run)
    c_ext = _extend(congested.reshape(days), spec.extension).reshape(n, S)
    nrc_ext = _extend(nrc, spec.extension).reshape(n, S)
    return SliceLabels(high, congested, nrc.reshape(n, S), c_ext & high[:, None], nrc_ext & high[:, None])


# ------------------------------------------------------------------ baseline
def ha_baseline(ha_tau: np.ndarray, anchors, F: int = 12) -> np.ndarray:
    """Predict ``ha_tau[:, t0 + f]`` for ``f = 1..F``; shape anchors x n x F."""
    t0 = np.atleast_1d(np.asarray(anchors, dtype=np.int64))
    return ha_tau[:, t0[:, None] + np.arange(1, F + 1)[None, :]].transpose(1, 0, 2)


def target_slots(anchors, F: int) -> np.ndarray:
    return np.asarray(anchors)[:, None] + np.arange(1, F + 1)[None, :]


# -------------------------------------------------------------------- report
@dataclass
class RunPredictions:
    variant: str
    anchors: np.ndarray
    pred: np.ndarray        # anchors x n x F


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)     # (slice, variant, horizon, metric, value, count)

    def value(self, slice_kind, variant, metric, horizon="all"):
        for s, v, h, m, val, _ in self.rows:
            if (s, v, str(h), m) == (slice_kind, variant, str(horizon), metric):
                return val
        raise KeyError((slice_kind, variant, metric, horizon))

    def variants(self):
        return list(dict.fromkeys(r[1] for r in self.rows))

    def slices(self):
        return list(dict.fromkeys(r[0] for r in self.rows))

    def table(self, slice_kind):
        """``{variant: (MAE, MAPE, RMSE, count)}`` over all horizons."""
        out = {}
        for v in self.variants():
            cells = {r[3]: r for r in self.rows if r[0] == slice_kind and r[1] == v and r[2] == "all"}
            if cells:
                out[v] = (cells["MAE"][4], cells["MAPE"][4], cells["RMSE"][4], cells["MAE"][5])
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["slice", "variant", "horizon", "metric", "value", "count"])
        for s, v, h, m, val, cnt in self.rows:
            w.writerow([s, v, h, m, repr(float(val)), cnt])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            rows.append((rec["slice"], rec["variant"], rec["horizon"], rec["metric"], float(rec["value"]),
                         int(rec["count"])))
        return cls(rows)

    def to_svg(self) -> str:
        return _svg_chart(self)


def build_report(runs: list[RunPredictions], truth_tau: np.ndarray, labels: SliceLabels,
                 slices=SLICE_KINDS) -> EvalReport:
    """Per-slice, per-variant, per-horizon metrics over identical test samples."""
    if not runs:
        raise ValueError("no runs to report")
    ref = runs[0]
    for r in runs:
        if not np.array_equal(r.anchors, ref.anchors) or r.pred.shape != ref.pred.shape:
            raise ValueError(f"run {r.variant!r} was evaluated on different anchors than {ref.variant!r}")
    F = ref.pred.shape[-1]
    tgt = target_slots(ref.anchors, F)                                   # B x F
    truth = truth_tau[:, tgt].transpose(1, 0, 2)                         # B x n x F
    report = EvalReport()
    for kind in slices:
        mask = labels.mask(kind)[:, tgt].transpose(1, 0, 2)
        if not mask.any():
            continue
        for r in runs:
            for h in ["all"] + list(range(1, F + 1)):
                sel = mask if h == "all" else mask & (np.arange(F) == h - 1)
                if not sel.any():
                    continue
                vals = compute_metrics(r.pred, truth, sel)
                cnt = int(sel.sum())
                for m, val in zip(METRICS, vals):
                    report.rows.append((kind, r.variant, h, m, val, cnt))
    return report


_PALETTE = ("#1b6ca8", "#d1495b", "#66a182", "#edae49", "#6c4f77", "#333333")


def _svg_chart(report: EvalReport, width=300, height=220, pad=40) -> str:
    """Per-horizon MAE lines, one panel per slice."""
    slices = report.slices()
    variants = report.variants()
    total_w = width * max(len(slices), 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{height + 30}" '
             f'font-family="sans-serif" font-size="10">']
    for p, s in enumerate(slices):
        x0 = p * width
        series = {}
        for v in variants:
            pts = sorted((int(h), val) for sl, vv, h, m, val, _ in report.rows
                         if sl == s and vv == v and m == "MAE" and h != "all")
            if pts:
                series[v] = pts
        if not series:
            continue
        hs = [h for pts in series.values() for h, _ in pts]
        ys = [y for pts in series.values() for _, y in pts]
        h_lo, h_hi = min(hs), max(hs)
        y_lo, y_hi = 0.0, max(ys) * 1.05 or 1.0

        def sx(h):
            return x0 + pad + (h - h_lo) / max(h_hi - h_lo, 1) * (width - 1.5 * pad)

        def sy(y):
            return height - pad + 10 - (y - y_lo) / (y_hi - y_lo) * (height - 1.5 * pad)

        parts.append(f'<text x="{x0 + width / 2:.1f}" y="14" text-anchor="middle">{s} MAE (s/m)</text>')
        parts.append(f'<line x1="{sx(h_lo):.1f}" y1="{sy(0):.1f}" x2="{sx(h_hi):.1f}" y2="{sy(0):.1f}" stroke="#000"/>')
        parts.append(f'<line x1="{sx(h_lo):.1f}" y1="{sy(0):.1f}" x2="{sx(h_lo):.1f}" y2="{sy(y_hi):.1f}" stroke="#000"/>')
        parts.append(f'<text x="{sx(h_lo) - 3:.1f}" y="{sy(y_hi) + 3:.1f}" text-anchor="end">{y_hi:.3g}</text>')
        parts.append(f'<text x="{sx(h_hi):.1f}" y="{sy(0) + 12:.1f}" text-anchor="middle">{h_hi}</text>')
        parts.append(f'<text x="{sx(h_lo):.1f}" y="{sy(0) + 12:.1f}" text-anchor="middle">{h_lo}</text>')
        for k, (v, pts) in enumerate(series.items()):
            col = _PALETTE[k % len(_PALETTE)]
            path = " ".join(f"{sx(h):.2f},{sy(y):.2f}" for h, y in pts)
            parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{path}"/>')
            if p == 0:
                parts.append(f'<text x="{10 + 90 * k}" y="{height + 22}" fill="{col}">{v}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
