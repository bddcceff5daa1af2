"""Command-line pipeline: simulate -> features -> train -> eval -> report.

Every command works inside one workspace directory (``--out``)::

    dataset/      network.json, travel_time.csv, volume.csv, navlog.txt
    features/     store.bin
    checkpoints/  <variant>.ckpt, <variant>.trace.csv
    eval/         report.csv
    report/       report.csv, report.svg, summary.txt

and leaves a ``manifest.json`` next to its outputs. Manifests record the
hashes of their inputs, so report -> checkpoint -> features -> dataset can be
audited. Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .evaluate import SLICE_KINDS, EvalReport, RunPredictions, build_report, ha_baseline
from .features import FeatureStore, TimeGrid
from .io import (ArchiveError, read_archive, read_navlog, read_network, read_series, sha256_file, write_archive,
                 write_navlog, write_network, write_series)
from .model import VARIANTS, HSTGCN, Normalizer
from .pipeline import architecture, prepare, simulate_scenario, slice_labels, time_grid, train_config
from .spectral import AdjacencySet, adjacency_fingerprint, scaled_laplacian
from .train import (AdjacencyMismatchWarning, CheckpointError, fit, load_checkpoint, predict_anchors,
                    save_checkpoint)

FEATURES_MAGIC = "HSTGCN-FEATURES"
SLICE_FLAGS = {"full": ("full",), "c": ("C",), "nrc": ("NRC",), "all": SLICE_KINDS}


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers
def _prepare_dir(path: Path, force: bool):
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"{path} exists and is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


def _write_manifest(directory: Path, stage: str, cfg: RunConfig, seed: int, inputs: dict, extra=None):
    outputs = {p.name: sha256_file(p) for p in sorted(directory.iterdir())
               if p.is_file() and p.name != "manifest.json"}
    doc = {"stage": stage, "version": __version__, "seed": seed, "config_sha256": cfg.section_hash(),
           "inputs": inputs, "outputs": outputs}
    doc.update(extra or {})
    (directory / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _read_manifest(directory: Path, stage: str) -> dict:
    path = directory / "manifest.json"
    if not path.exists():
        raise UsageError(f"{directory} has no manifest; run the `{stage}` command first")
    doc = json.loads(path.read_text())
    if doc.get("stage") != stage:
        raise UsageError(f"{path} belongs to stage {doc.get('stage')!r}, expected {stage!r}")
    for name, digest in doc["outputs"].items():
        if sha256_file(directory / name) != digest:
            raise RuntimeError(f"{directory / name} does not match its manifest hash")
    return doc


def _grid_from(doc: dict) -> TimeGrid:
    return TimeGrid(**doc["grid"])


def _load_store(ws: Path) -> tuple[FeatureStore, dict, dict]:
    fdir = ws / "features"
    doc = _read_manifest(fdir, "features")
    meta, t = read_archive(fdir / "store.bin", FEATURES_MAGIC)
    grid = TimeGrid(**meta["grid"])
    store = FeatureStore(grid, meta["P"], meta["F"], t["nu"], t["travel_time"], t["ha_volume"], t["ha_time"],
                         meta["skipped_hops"])
    return store, t, doc


# ----------------------------------------------------------------- commands
def cmd_simulate(cfg: RunConfig, ws: Path, seed: int, force: bool, out=print):
    ddir = ws / "dataset"
    _prepare_dir(ddir, force)
    sc = simulate_scenario(cfg.scenario, seed)
    sc.sim.log.validate(sc.net.n)
    write_network(sc.net, ddir / "network.json")
    write_series(sc.sim.travel_time, ddir / "travel_time.csv")
    write_series(sc.sim.volume, ddir / "volume.csv", integer=True)
    write_navlog(sc.sim.log, ddir / "navlog.txt")
    grid = sc.grid
    extra = {"grid": {"slot_minutes": grid.slot_minutes, "day_start_hour": grid.day_start_hour,
                      "day_end_hour": grid.day_end_hour, "weeks_train": grid.weeks_train,
                      "weeks_test": grid.weeks_test},
             "s_train": grid.s_train, "s_test": grid.s_test, "n_segments": sc.net.n,
             "scenario_sha256": cfg.section_hash("scenario"), "surge_events": len(sc.demand.surges),
             "navigation_records": len(sc.sim.log)}
    _write_manifest(ddir, "simulate", cfg, seed, {}, extra)
    out(f"simulated {grid.n_days} days on {sc.net.n} segments: {int(sc.sim.spawned.sum())} vehicles, "
        f"{len(sc.sim.log)} navigation records, {len(sc.demand.surges)} surge events -> {ddir}")


def cmd_features(cfg: RunConfig, ws: Path, seed: int, force: bool, out=print):
    ddir, fdir = ws / "dataset", ws / "features"
    ddoc = _read_manifest(ddir, "simulate")
    grid = _grid_from(ddoc)
    if grid != time_grid(cfg.scenario):
        raise UsageError(f"dataset time grid {ddoc['grid']} differs from the config's scenario section")
    _prepare_dir(fdir, force)
    net = read_network(ddir / "network.json")
    tau = read_series(ddir / "travel_time.csv", net.n, grid.n_slots)
    vol = read_series(ddir / "volume.csv", net.n, grid.n_slots, integer=True)
    log = read_navlog(ddir / "navlog.txt")
    prep = prepare(net, grid, tau, vol, log, cfg.features, cfg.model.cheb_order)
    s = prep.store
    meta = {"grid": ddoc["grid"], "P": s.P, "F": s.F, "v_channels": s.v_channels, "t_channels": s.t_channels,
            "n": s.n, "skipped_hops": s.skipped_hops, "sigma2": cfg.features.sigma2,
            "epsilon": cfg.features.epsilon,
            "adjacency_sha256": {"compound": adjacency_fingerprint(prep.adjacency.compound),
                                 "dijkstra": adjacency_fingerprint(prep.adjacency.dijkstra)}}
    tensors = {"nu": s.nu, "travel_time": s.travel_time, "ha_volume": s.ha_volume, "ha_time": s.ha_time,
               "volume": vol, "adjacency/dijkstra": prep.adjacency.dijkstra,
               "adjacency/covariance": prep.adjacency.covariance, "adjacency/compound": prep.adjacency.compound,
               "normalizer/t_mean": prep.normalizer.t_mean, "normalizer/t_std": prep.normalizer.t_std,
               "normalizer/v_scale": prep.normalizer.v_scale}
    write_archive(fdir / "store.bin", FEATURES_MAGIC, meta, tensors)
    (fdir / "network.json").write_bytes((ddir / "network.json").read_bytes())
    _write_manifest(fdir, "features", cfg, seed, {"dataset/manifest.json": sha256_file(ddir / "manifest.json")},
                    {"v_channels": s.v_channels, "t_channels": s.t_channels})
    hops = log.n_hops
    out(f"volume cube {s.nu.shape}, {s.v_channels} volume / {s.t_channels} travel-time channels; "
        f"{hops} hops aggregated, {s.skipped_hops} ETAs outside the grid skipped")


def _prepared_from_store(ws: Path):
    store, t, doc = _load_store(ws)
    net = read_network(ws / "features" / "network.json")
    if net.n != store.n:
        raise RuntimeError(f"network has {net.n} segments, feature store has {store.n}")
    adj = AdjacencySet(t["adjacency/dijkstra"], t["adjacency/covariance"], t["adjacency/compound"], 0.0, 0.0)
    norm = Normalizer(t["normalizer/t_mean"], t["normalizer/t_std"], t["normalizer/v_scale"])
    return store, net, adj, norm, t["volume"], doc


def _variants(args, cfg) -> list[str]:
    return [args.variant] if args.variant else [cfg.model.variant]


def cmd_train(cfg: RunConfig, ws: Path, seed: int, force: bool, variants, out=print):
    store, net, adj, norm, _, _ = _prepared_from_store(ws)
    cdir = ws / "checkpoints"
    cdir.mkdir(parents=True, exist_ok=True)
    for v in variants:
        ckpt = cdir / f"{v}.ckpt"
        if ckpt.exists() and not force:
            raise UsageError(f"{ckpt} exists; pass --force to overwrite")
        w = adj.dijkstra if v == "stgcn" else adj.compound
        op = scaled_laplacian(w, cfg.model.cheb_order)
        arch = architecture(cfg.model, v, store)
        tc = train_config(cfg.train, v, seed)
        res = fit(store, op, tc, arch, normalizer=norm, log=lambda m: out(f"[{v}] {m}"))
        save_checkpoint(ckpt, res.model.params, arch, norm, adjacency_fingerprint(w), tc,
                        {"best_epoch": res.best_epoch, "best_val": res.best_val, "seed": seed,
                         "features_manifest": sha256_file(ws / "features" / "manifest.json")})
        trace = ["epoch,lr,train_loss,val_loss,steps,clipped_steps"]
        trace += [f"{r.epoch},{r.lr!r},{r.train_loss!r},{r.val_loss!r},{r.steps},{r.clipped_steps}" for r in res.trace]
        (cdir / f"{v}.trace.csv").write_text("\n".join(trace) + "\n")
        out(f"[{v}] best epoch {res.best_epoch}, validation MAE {res.best_val:.6f} -> {ckpt}")
    _write_manifest(cdir, "train", cfg, seed, {"features/manifest.json": sha256_file(ws / "features" / "manifest.json")})


def cmd_eval(cfg: RunConfig, ws: Path, seed: int, force: bool, variant, slices, out=print, err=print):
    store, net, adj, norm, volume, _ = _prepared_from_store(ws)
    cdir, edir = ws / "checkpoints", ws / "eval"
    names = [variant] if variant else [v for v in VARIANTS if (cdir / f"{v}.ckpt").exists()]
    if variant and not (cdir / f"{variant}.ckpt").exists():
        raise UsageError(f"no checkpoint for {variant} in {cdir}; run `train --variant {variant}` first")
    _prepare_dir(edir, force)
    from .pipeline import Prepared
    prep = Prepared(net, store, volume, adj, {}, norm)
    labels = slice_labels(prep, cfg.eval)
    test = store.anchors("test")
    runs = [RunPredictions("HA", test, ha_baseline(store.ha_time, test, store.F))]
    inputs = {}
    for v in names:
        w = adj.dijkstra if v == "stgcn" else adj.compound
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", AdjacencyMismatchWarning)
            ck = load_checkpoint(cdir / f"{v}.ckpt", n=store.n, adjacency=w)
        for c in caught:
            err(f"warning: {v}: {c.message}")
        op = scaled_laplacian(w, ck.arch.cheb_order)
        model = HSTGCN(ck.arch, op, params=ck.params, normalizer=ck.normalizer)
        runs.append(RunPredictions(ck.arch.variant, test, predict_anchors(model, store, test)))
        inputs[f"checkpoints/{v}.ckpt"] = sha256_file(cdir / f"{v}.ckpt")
    report = build_report(runs, store.travel_time, labels, slices)
    (edir / "report.csv").write_text(report.to_csv())
    _write_manifest(edir, "eval", cfg, seed, inputs)
    for s in report.slices():
        for v, (mae, mape, rmse, cnt) in report.table(s).items():
            out(f"{s:>4} {v:>10}  MAE {mae:.5f}  MAPE {mape:6.2f}%  RMSE {rmse:.5f}  n={cnt}")


def cmd_report(cfg: RunConfig, ws: Path, seed: int, force: bool, slices, out=print):
    edir, rdir = ws / "eval", ws / "report"
    _read_manifest(edir, "eval")
    _prepare_dir(rdir, force)
    report = EvalReport.from_csv((edir / "report.csv").read_text())
    report = EvalReport([r for r in report.rows if r[0] in slices])
    if not report.rows:
        raise UsageError(f"evaluation holds none of the slices {list(slices)}")
    (rdir / "report.csv").write_text(report.to_csv())
    (rdir / "report.svg").write_text(report.to_svg())
    lines = []
    for s in report.slices():
        lines.append(f"[{s}]")
        lines.append(f"{'variant':>12} {'MAE (s/m)':>10} {'MAPE (%)':>9} {'RMSE (s/m)':>11} {'samples':>9}")
        for v, (mae, mape, rmse, cnt) in report.table(s).items():
            lines.append(f"{VARIANTS.get(v, v):>12} {mae:10.5f} {mape:9.2f} {rmse:11.5f} {cnt:9d}")
        lines.append("")
    text = "\n".join(lines)
    (rdir / "summary.txt").write_text(text)
    _write_manifest(rdir, "report", cfg, seed, {"eval/manifest.json": sha256_file(edir / "manifest.json")})
    out(text.rstrip())


# --------------------------------------------------------------------- main
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hstgcn", description="Travel-time forecasting pipeline")
    p.add_argument("command", choices=["simulate", "features", "train", "eval", "report"])
    p.add_argument("--config", help="INI run configuration (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="seed for this command (overrides [run] seed)")
    p.add_argument("--out", default="workspace", help="workspace directory (default: ./workspace)")
    p.add_argument("--variant", choices=sorted(VARIANTS), help="model variant (train/eval)")
    p.add_argument("--slice", choices=sorted(SLICE_FLAGS), default="all", help="test slices to evaluate/report")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    err = lambda m: print(m, file=sys.stderr)  # noqa: E731
    try:
        cfg = load_config(args.config)
        seed = cfg.run.seed if args.seed is None else args.seed
        if seed < 0:
            raise UsageError("--seed must be >= 0")
        ws = Path(args.out)
        slices = SLICE_FLAGS[args.slice]
        if args.command == "simulate":
            cmd_simulate(cfg, ws, seed, args.force)
        elif args.command == "features":
            cmd_features(cfg, ws, seed, args.force)
        elif args.command == "train":
            cmd_train(cfg, ws, seed, args.force, _variants(args, cfg))
        elif args.command == "eval":
            cmd_eval(cfg, ws, seed, args.force, args.variant, slices, err=err)
        else:
            cmd_report(cfg, ws, seed, args.force, slices)
    except (ConfigError, UsageError) as exc:
        err(f"error: {exc}")
        return 2
    except (CheckpointError, ArchiveError, ValueError, RuntimeError, OSError, FloatingPointError) as exc:
        err(f"error: {exc}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
