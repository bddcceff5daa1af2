"""H-STGCN and its ablation variants on top of :mod:`hstgcn.tensor`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spectral import SpectralOperator
from .tensor import Graph, GraphError, glorot_uniform

VARIANTS = {
    "hstgcn": "H-STGCN",
    "hstgcn1": "H-STGCN(1)",
    "stgcn-im": "STGCN(Im)",
    "stgcn": "STGCN",
}


@dataclass(frozen=True)
class ArchitectureConfig:
    variant: str = "hstgcn"
    n: int = 48
    P: int = 6
    F: int = 12
    transformer_channels: tuple[int, int] = (16, 16)
    gated_channels: tuple[int, int, int, int] = (64, 128, 64, 64)
    graph_channels: int = 64
    kernel_sizes: tuple[int, int, int, int] = (3, 3, 3, 2)
    cheb_order: int = 3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if min(self.n, self.P, self.F, self.graph_channels, self.cheb_order) < 1:
            raise ValueError("sizes must be positive")
        k1, k2, k3, k4 = self.kernel_sizes
        if self.hybrid and k1 != k2:
            raise ValueError("both branch convolutions must shrink time equally to be concatenated")
        remaining = self.P - (k2 - 1) - (k3 - 1) - (k4 - 1)
        if remaining != 1:
            raise ValueError(f"temporal length reaching the output head is {remaining}, must be 1 "
                             f"(P={self.P}, kernel sizes {self.kernel_sizes})")

    @property
    def hybrid(self) -> bool:
        return self.variant in ("hstgcn", "hstgcn1")

    @property
    def uses_compound(self) -> bool:
        return self.variant != "stgcn"

    @property
    def v_channels(self) -> int:
        return 2 * (self.F + 1)

    @property
    def t_channels(self) -> int:
        return self.F + 2

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        c_sh, c_seg = self.transformer_channels
        g1, g2, g3, g4 = self.gated_channels
        k1, k2, k3, k4 = self.kernel_sizes
        shapes = {}
        if self.hybrid:
            shapes.update({
                "transformer.shared.weight": (self.v_channels, c_sh),
                "transformer.shared.bias": (c_sh,),
                "transformer.segment.weight": (self.n, c_sh, c_seg),
                "transformer.segment.bias": (self.n, c_seg),
                "gated1.kernel": (k1, c_seg, 2 * g1),
                "gated1.bias": (2 * g1,),
            })
        gc_in = g2 + (g1 if self.hybrid else 0)
        shapes.update({
            "gated2.kernel": (k2, self.t_channels, 2 * g2),
            "gated2.bias": (2 * g2,),
            "graph.theta": (self.cheb_order, gc_in, self.graph_channels),
            "graph.bias": (self.graph_channels,),
            "gated3.kernel": (k3, self.graph_channels, 2 * g3),
            "gated3.bias": (2 * g3,),
            "gated4.kernel": (k4, g3, 2 * g4),
            "gated4.bias": (2 * g4,),
            "head.weight": (g4, self.F),
            "head.bias": (self.F,),
        })
        return shapes


def init_parameters(config: ArchitectureConfig, seed=0) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, drawn in a fixed name order."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in config.parameter_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        elif name == "transformer.segment.weight":
            params[name] = glorot_uniform(shape, shape[1], shape[2], rng)
        elif len(shape) == 3:
            params[name] = glorot_uniform(shape, shape[0] * shape[1], shape[0] * shape[2], rng)
        else:
            params[name] = glorot_uniform(shape, shape[0], shape[1], rng)
    return params


# --------------------------------------------------------------------- layers
def domain_transformer(g: Graph, v, w_shared, b_shared, w_seg, b_seg):
    """Shared then segment-wise 1x1 convolution, each followed by ELU.

    ``v`` is (n, P, C); ``w_seg`` is (n, C1, C2) with one matrix per segment.
    """
    n = g.shape(v)[0]
    if g.shape(w_seg)[0] != n:
        raise GraphError(f"segment-wise weights cover {g.shape(w_seg)[0]} segments, input has {n}")
    shared = g.elu(g.add(g.matmul(v, w_shared), b_shared))
    c_out = g.shape(b_seg)[-1]
    seg = g.add(g.matmul(shared, w_seg), g.reshape(b_seg, (n, 1, c_out)))
    return g.elu(seg)


def temporal_gated_conv(g: Graph, x, kernel, bias):
    """Valid temporal convolution to ``[A B]`` followed by ``A * sigmoid(B)``."""
    ab = g.add(g.conv1d(x, kernel), bias)
    c = g.shape(ab)[-1] // 2
    return g.mul(g.slice(ab, -1, 0, c), g.sigmoid(g.slice(ab, -1, c, 2 * c)))


def graph_conv(g: Graph, h, laplacian, theta, bias):
    """Chebyshev graph convolution on every time slice, then ELU.

    ``h`` is (n, len, Cin); ``theta`` is (K, Cin, Cout). ``laplacian`` is the
    scaled Laplacian as a graph node or array.
    """
    n, length, c_in = g.shape(h)
    K, theta_in, c_out = g.shape(theta)
    if theta_in != c_in:
        raise GraphError(f"graph convolution expects {theta_in} input channels, got {c_in}")
    lap = g.const(laplacian) if isinstance(laplacian, np.ndarray) else laplacian
    flat = g.reshape(h, (n, length * c_in))
    terms = [flat]
    if K > 1:
        terms.append(g.matmul(lap, flat))
    two = g.const(2.0) if K > 2 else None
    for _ in range(2, K):
        terms.append(g.sub(g.mul(two, g.matmul(lap, terms[-1])), terms[-2]))
    stacked = g.concat([g.reshape(t, (n, length, c_in)) for t in terms], axis=-1)
    out = g.matmul(stacked, g.reshape(theta, (K * c_in, c_out)))
    return g.elu(g.add(out, bias))


# ---------------------------------------------------------------------- model
@dataclass
class Normalizer:
    """Input scaling baked into the graph.

    Travel-time channels are z-scored and channel 0's statistics also map the
    head output back to s/m. Volume channels are divided by ``v_scale`` after
    noise injection, so the noise threshold stays in vehicles.
    """

    t_mean: np.ndarray
    t_std: np.ndarray
    v_scale: np.ndarray

    def __post_init__(self):
        self.t_mean = np.asarray(self.t_mean, dtype=float)
        self.t_std = np.asarray(self.t_std, dtype=float)
        self.v_scale = np.asarray(self.v_scale, dtype=float)
        if np.any(self.t_std <= 0) or np.any(self.v_scale <= 0):
            raise ValueError("normalizer scales must be positive")

    @classmethod
    def identity(cls, t_channels, v_channels):
        return cls(np.zeros(t_channels), np.ones(t_channels), np.ones(v_channels))

    @classmethod
    def from_store(cls, store):
        """Statistics over the training range of a :class:`FeatureStore`."""
        S = store.grid.s_train
        tau, ha = store.travel_time[:, :S], store.ha_time[:, :S]
        t_mean = np.r_[tau.mean(), np.full(store.F + 1, ha.mean())]
        t_std = np.r_[tau.std(), np.full(store.F + 1, ha.std())]
        # one scale per volume kind, at least one vehicle: far leads are often all zero
        vol = np.r_[np.full(store.F + 1, store.nu[:, :S, 0].std()), np.full(store.F + 1, store.ha_volume[:, :S].std())]
        return cls(t_mean, np.maximum(t_std, 1e-12), np.maximum(vol, 1.0))


@dataclass
class HSTGCN:
    config: ArchitectureConfig
    spectral: SpectralOperator
    params: dict[str, np.ndarray] | None = None
    normalizer: Normalizer | None = None
    seed: int = 0
    graph: Graph = field(init=False, repr=False)

    def __post_init__(self):
        cfg = self.config
        if self.spectral.scaled_laplacian.shape != (cfg.n, cfg.n):
            raise ValueError(f"Laplacian is {self.spectral.scaled_laplacian.shape}, config has n={cfg.n}")
        if self.spectral.chebyshev_order != cfg.cheb_order:
            raise ValueError("Chebyshev order differs between config and spectral operator")
        if self.params is None:
            self.params = init_parameters(cfg, self.seed)
        expected = cfg.parameter_shapes()
        if set(expected) != set(self.params):
            raise ValueError(f"parameter names differ from {cfg.variant} layout: "
                             f"missing {sorted(set(expected) - set(self.params))}, "
                             f"unexpected {sorted(set(self.params) - set(expected))}")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")
        if self.normalizer is None:
            self.normalizer = Normalizer.identity(cfg.t_channels, cfg.v_channels)
        self._build()

    def _build(self):
        cfg = self.config
        g = Graph()
        p = {name: g.param(name, value) for name, value in self.params.items()}
        # the graph owns the arrays from here on; keep one shared dict
        self.params = g.params
        norm = self.normalizer
        t_in = g.input("T", (cfg.n, cfg.P, cfg.t_channels))
        t_std = g.const(norm.t_std)
        t_z = g.mul(g.sub(t_in, g.const(norm.t_mean)), g.const(1.0 / np.asarray(norm.t_std)))
        h_tau = temporal_gated_conv(g, t_z, p["gated2.kernel"], p["gated2.bias"])
        if cfg.hybrid:
            v_in = g.input("V", (cfg.n, cfg.P, cfg.v_channels))
            v_s = g.mul(v_in, g.const(1.0 / norm.v_scale))
            x_g1 = domain_transformer(g, v_s, p["transformer.shared.weight"], p["transformer.shared.bias"],
                                      p["transformer.segment.weight"], p["transformer.segment.bias"])
            h_nu = temporal_gated_conv(g, x_g1, p["gated1.kernel"], p["gated1.bias"])
            h = g.concat([h_nu, h_tau], axis=-1)
        else:
            h = h_tau
        h = graph_conv(g, h, self.spectral.scaled_laplacian, p["graph.theta"], p["graph.bias"])
        h = temporal_gated_conv(g, h, p["gated3.kernel"], p["gated3.bias"])
        h = temporal_gated_conv(g, h, p["gated4.kernel"], p["gated4.bias"])
        n, length, c = g.shape(h)
        h = g.reshape(h, (n, length * c))
        z = g.add(g.matmul(h, p["head.weight"]), p["head.bias"])
        self.pred = g.add(g.mul(z, g.slice(t_std, 0, 0, 1)), g.const(norm.t_mean[:1]), name="pred")
        y = g.input("y", (cfg.n, cfg.F))
        self.loss = g.mean(g.abs(g.sub(self.pred, y)), name="loss")
        self.graph = g

    def _inputs(self, V, T):
        inputs = {"T": T}
        if self.config.hybrid:
            if V is None:
                raise ValueError(f"{self.config.variant} needs the volume tensor V")
            inputs["V"] = np.ones_like(V) if self.config.variant == "hstgcn1" else V
        return inputs

    def predict(self, V, T) -> np.ndarray:
        """Travel-time forecasts, [batch x] n x F, in s/m."""
        return self.graph.forward(self._inputs(V, T), until=self.pred)["pred"]

    def loss_and_grads(self, V, T, y):
        inputs = self._inputs(V, T)
        inputs["y"] = y
        out = self.graph.forward(inputs)
        return float(out["loss"]), self.graph.backward(self.loss)
