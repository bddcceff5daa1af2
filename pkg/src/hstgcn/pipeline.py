"""In-process pipeline: scenario, features, training and evaluation.

The CLI runs these stages as separate commands through files; the helpers
here do the same work in memory, which is what the ablation driver uses.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import EvalSection, FeaturesSection, ModelSection, RunConfig, ScenarioSection, TrainSection, stage_seed
from .evaluate import EvalReport, RunPredictions, SliceLabels, SliceSpec, build_report, classify_slices, ha_baseline
from .features import FeatureStore, NavigationLog, TimeGrid, build_feature_store
from .model import VARIANTS, ArchitectureConfig, Normalizer
from .network import RoadNetwork, generate_network
from .sim import DemandModel, FundamentalDiagram, SimResult, default_demand, propagate_traffic
from .spectral import AdjacencySet, SpectralOperator, build_adjacency, scaled_laplacian
from .train import FitResult, TrainConfig, fit, predict_anchors


@dataclass
class Scenario:
    net: RoadNetwork
    grid: TimeGrid
    demand: DemandModel
    fd: FundamentalDiagram
    sim: SimResult


def time_grid(sc: ScenarioSection) -> TimeGrid:
    return TimeGrid(weeks_train=sc.weeks_train, weeks_test=sc.weeks_test)


def simulate_scenario(sc: ScenarioSection, seed: int = 0, follow_plan: bool = False) -> Scenario:
    grid = time_grid(sc)
    net = generate_network(sc.kind, sc.n_target, seed=stage_seed(seed, "network"))
    demand = default_demand(net, grid, seed=stage_seed(seed, "demand"), scale=sc.demand_scale,
                            surges_per_week=sc.surges_per_week,
                            surge_intensity=(sc.surge_intensity_min, sc.surge_intensity_max),
                            surge_duration=(sc.surge_duration_min, sc.surge_duration_max),
                            p_nav=sc.p_nav, day_sigma=sc.day_sigma)
    fd = FundamentalDiagram.for_network(net)
    sim = propagate_traffic(net, demand, fd, grid, seed=stage_seed(seed, "traffic"), follow_plan=follow_plan)
    return Scenario(net, grid, demand, fd, sim)


@dataclass
class Prepared:
    net: RoadNetwork
    store: FeatureStore
    volume: np.ndarray
    adjacency: AdjacencySet
    operators: dict[str, SpectralOperator]
    normalizer: Normalizer

    @property
    def grid(self) -> TimeGrid:
        return self.store.grid

    def operator(self, variant: str) -> SpectralOperator:
        return self.operators["dijkstra" if variant == "stgcn" else "compound"]

    def adjacency_for(self, variant: str) -> np.ndarray:
        return self.adjacency.dijkstra if variant == "stgcn" else self.adjacency.compound


def prepare(net: RoadNetwork, grid: TimeGrid, travel_time, volume, log: NavigationLog,
            fs: FeaturesSection | None = None, cheb_order: int = 3) -> Prepared:
    fs = fs or FeaturesSection()
    store = build_feature_store(travel_time, log, grid, fs.P, fs.F, fs.literal_ha)
    adj = build_adjacency(net, store.travel_time[:, :grid.s_train], fs.sigma2, fs.epsilon)
    ops = {"compound": scaled_laplacian(adj.compound, cheb_order),
           "dijkstra": scaled_laplacian(adj.dijkstra, cheb_order)}
    return Prepared(net, store, np.asarray(volume), adj, ops, Normalizer.from_store(store))


def slice_spec(es: EvalSection) -> SliceSpec:
    return SliceSpec(es.high_volume_per_min,
                     {"freeway": es.congestion_freeway, "highway": es.congestion_highway,
                      "expressway": es.congestion_expressway, "major": es.congestion_major},
                     es.nrc_fraction, es.extension, es.min_nrc_run)


def slice_labels(prep: Prepared, es: EvalSection | None = None) -> SliceLabels:
    return classify_slices(prep.store.travel_time, prep.store.ha_time, prep.volume, prep.net,
                           slice_spec(es or EvalSection()), prep.grid)


def architecture(ms: ModelSection, variant: str, store: FeatureStore) -> ArchitectureConfig:
    return ArchitectureConfig(variant, n=store.n, P=store.P, F=store.F,
                              transformer_channels=tuple(ms.transformer_channels),
                              gated_channels=tuple(ms.gated_channels), graph_channels=ms.graph_channels,
                              kernel_sizes=tuple(ms.kernel_sizes), cheb_order=ms.cheb_order)


def train_config(ts: TrainSection, variant: str, seed: int) -> TrainConfig:
    return TrainConfig(variant=variant, epochs=ts.epochs, batch_size=ts.batch_size, base_lr=ts.base_lr,
                       decay=ts.decay, noise=ts.noise, noise_std=ts.noise_std, noise_threshold=ts.noise_threshold,
                       seed=stage_seed(seed, "train"), patience=ts.patience, clip_norm=ts.clip_norm,
                       steps_per_epoch=ts.steps_per_epoch, val_stride=ts.val_stride)


def train_variant(prep: Prepared, cfg: RunConfig, variant: str, seed: int, log=None) -> FitResult:
    arch = architecture(cfg.model, variant, prep.store)
    return fit(prep.store, prep.operator(variant), train_config(cfg.train, variant, seed), arch,
               normalizer=prep.normalizer, log=log)


@dataclass
class AblationResult:
    reports: dict[int, EvalReport] = field(default_factory=dict)
    fits: dict[tuple[int, str], FitResult] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def summary(self, slice_kind: str, metric: str = "MAE") -> dict[str, tuple[float, float]]:
        """``{variant: (mean, std)}`` of ``metric`` across seeds (population std)."""
        out = {}
        variants = next(iter(self.reports.values())).variants()
        for v in variants:
            vals = [rep.value(slice_kind, v, metric) for rep in self.reports.values()]
            out[v] = (float(np.mean(vals)), float(np.std(vals)))
        return out


def run_ablation(cfg: RunConfig | None = None, seeds=(0, 1, 2), variants=tuple(VARIANTS), log=None,
                 scenario: Scenario | None = None) -> AblationResult:
    """Simulate once, then train and evaluate every variant for every seed."""
    cfg = cfg or RunConfig()
    result = AblationResult()
    t0 = time.perf_counter()
    scenario = scenario or simulate_scenario(cfg.scenario, cfg.run.seed)
    result.timings["simulate"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    prep = prepare(scenario.net, scenario.grid, scenario.sim.travel_time, scenario.sim.volume, scenario.sim.log,
                   cfg.features, cfg.model.cheb_order)
    labels = slice_labels(prep, cfg.eval)
    test = prep.store.anchors("test")
    ha = RunPredictions("HA", test, ha_baseline(prep.store.ha_time, test, prep.store.F))
    result.timings["features"] = time.perf_counter() - t1
    for seed in seeds:
        runs = [ha]
        for v in variants:
            t2 = time.perf_counter()
            res = train_variant(prep, cfg, v, seed)
            result.fits[(seed, v)] = res
            runs.append(RunPredictions(v, test, predict_anchors(res.model, prep.store, test)))
            result.timings[f"{v}/seed{seed}"] = time.perf_counter() - t2
            if log:
                log(f"seed {seed} {v}: best epoch {res.best_epoch}, val {res.best_val:.5f}, "
                    f"{result.timings[f'{v}/seed{seed}']:.0f}s")
        result.reports[seed] = build_report(runs, prep.store.travel_time, labels)
    result.timings["total"] = time.perf_counter() - t0
    return result
