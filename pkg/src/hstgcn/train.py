"""Training loop, L1 objective and checkpoints."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .features import FeatureStore, inject_noise
from .io import ArchiveError, read_archive, write_archive
from .model import HSTGCN, ArchitectureConfig, Normalizer
from .spectral import SpectralOperator, adjacency_fingerprint
from .tensor import AdamState, adam_step

CHECKPOINT_MAGIC = "HSTGCN-CHECKPOINT"
CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class CheckpointError(ValueError):
    pass


class AdjacencyMismatchWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "hstgcn"
    epochs: int = 100
    batch_size: int = 8
    base_lr: float = 0.001
    decay: float = 0.98
    noise: bool = True
    noise_std: float = 0.3
    noise_threshold: float = 3.0
    seed: int = 0
    patience: int = 10
    clip_norm: float = 5.0
    # optional cap on optimizer steps per epoch (anchors are then a random subset)
    steps_per_epoch: int = 0
    # evaluate validation on every k-th validation anchor
    val_stride: int = 1

    def __post_init__(self):
        positive = ("epochs", "batch_size", "base_lr", "decay", "noise_std", "noise_threshold", "patience",
                    "clip_norm", "val_stride")
        bad = [k for k in positive if not getattr(self, k) > 0]
        if bad or self.steps_per_epoch < 0 or self.seed < 0:
            raise ValueError(f"training settings must be positive: {bad or ['steps_per_epoch/seed']}")
        if self.decay > 1:
            raise ValueError("decay must lie in (0, 1]")


def l1_loss(pred, truth) -> float:
    """Mean absolute error over every entry (and over anchors when batched)."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if not np.all(np.isfinite(pred)):
        raise FloatingPointError("prediction contains non-finite values")
    if not np.all(np.isfinite(truth)):
        raise ValueError("ground truth contains non-finite values")
    return float(np.mean(np.abs(pred - truth)))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    steps: int
    clipped_steps: int


@dataclass
class FitResult:
    model: HSTGCN
    trace: list[EpochRecord]
    best_epoch: int
    best_val: float

    def trace_array(self) -> np.ndarray:
        return np.array([[r.epoch, r.lr, r.train_loss, r.val_loss, r.steps, r.clipped_steps] for r in self.trace])


def split_anchors(store: FeatureStore):
    """Training anchors before the last training week, validation anchors inside it."""
    grid = store.grid
    val_start = grid.s_train - grid.slots_per_week
    if grid.weeks_train < 2:
        raise ValueError("need at least two training weeks to hold one out for validation")
    return store.anchors("test", span=(0, val_start)), store.anchors("test", span=(val_start, grid.s_train))


def predict_anchors(model: HSTGCN, store: FeatureStore, anchors, batch: int = 64) -> np.ndarray:
    """Forecasts for every anchor, shape anchors x n x F."""
    out = []
    for lo in range(0, len(anchors), batch):
        w = store.window(np.asarray(anchors[lo:lo + batch]))
        out.append(model.predict(w.V, w.T))
    return np.concatenate(out) if out else np.empty((0, store.n, store.F))


def _global_clip(grads, max_norm):
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
        return True
    return False


def fit(store: FeatureStore, spectral: SpectralOperator, config: TrainConfig, arch: ArchitectureConfig | None = None,
        train_anchors=None, val_anchors=None, normalizer: Normalizer | None = None, log=None) -> FitResult:
    """Train one variant; returns the parameters with the lowest validation loss.

    Anchors default to :func:`split_anchors`. ``log`` receives one line per epoch.
    """
    arch = arch or ArchitectureConfig(config.variant, n=store.n, P=store.P, F=store.F,
                                      cheb_order=spectral.chebyshev_order)
    if arch.variant != config.variant:
        raise ValueError("architecture and training config name different variants")
    default_train, default_val = split_anchors(store)
    train_anchors = default_train if train_anchors is None else np.asarray(train_anchors)
    val_anchors = default_val if val_anchors is None else np.asarray(val_anchors)
    val_anchors = val_anchors[::config.val_stride]
    if len(train_anchors) == 0 or len(val_anchors) == 0:
        raise ValueError("empty training or validation anchor set")
    normalizer = normalizer or Normalizer.from_store(store)
    seeds = np.random.SeedSequence([config.seed, 0x7EA1]).spawn(3)
    model = HSTGCN(arch, spectral, normalizer=normalizer, seed=int(seeds[0].generate_state(1)[0]))
    shuffle_rng = np.random.default_rng(seeds[1])
    noise_rng = np.random.default_rng(seeds[2])
    state = AdamState(base_lr=config.base_lr, decay_rate=config.decay)
    val_windows = [store.window(val_anchors[lo:lo + 64]) for lo in range(0, len(val_anchors), 64)]

    trace, best_val, best_epoch, best_params = [], np.inf, -1, None
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(train_anchors)
        if config.steps_per_epoch:
            order = order[:config.steps_per_epoch * config.batch_size]
        losses, clipped = [], 0
        for lo in range(0, len(order), config.batch_size):
            w = store.window(order[lo:lo + config.batch_size])
            V = inject_noise(w.V, config.noise_threshold, config.noise_std, noise_rng) if config.noise else w.V
            loss, grads = model.loss_and_grads(V, w.T, w.label)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {len(losses)}", trace)
            clipped += _global_clip(grads, config.clip_norm)
            adam_step(state, model.params, grads, epoch)
            losses.append(loss)
        val_err, val_cnt = 0.0, 0
        for w in val_windows:
            pred = model.predict(w.V, w.T)
            val_err += l1_loss(pred, w.label) * pred.size
            val_cnt += pred.size
        rec = EpochRecord(epoch, state.effective_lr(epoch), float(np.mean(losses)), val_err / val_cnt, len(losses),
                          clipped)
        trace.append(rec)
        if log:
            log(f"epoch {epoch:3d} lr {rec.lr:.6f} train {rec.train_loss:.6f} val {rec.val_loss:.6f}"
                + (f" clipped {clipped}" if clipped else ""))
        if rec.val_loss < best_val:
            best_val, best_epoch = rec.val_loss, epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
        elif epoch - best_epoch >= config.patience:
            break
    for k, v in best_params.items():
        model.params[k][...] = v
    return FitResult(model, trace, best_epoch, float(best_val))


def overfit_steps(model: HSTGCN, V, T, y, steps: int = 500, lr: float = 0.001):
    """Plain Adam on one fixed batch; returns the loss trace (overfitting sanity check)."""
    state = AdamState(base_lr=lr, decay_rate=1.0)
    losses = []
    for _ in range(steps):
        loss, grads = model.loss_and_grads(V, T, y)
        losses.append(loss)
        adam_step(state, model.params, grads, 0)
    return np.array(losses)


# ---------------------------------------------------------------- checkpoints
@dataclass
class Checkpoint:
    arch: ArchitectureConfig
    params: dict[str, np.ndarray]
    normalizer: Normalizer
    fingerprint: str
    train_config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, params, arch: ArchitectureConfig, normalizer: Normalizer, adjacency_hash: str,
                    train_config: TrainConfig | None = None, extra: dict | None = None) -> None:
    for name, value in params.items():
        if not np.all(np.isfinite(value)):
            raise ValueError(f"parameter {name} is not finite")
    tensors = {f"param/{k}": v for k, v in params.items()}
    tensors.update({"normalizer/t_mean": normalizer.t_mean, "normalizer/t_std": normalizer.t_std,
                    "normalizer/v_scale": normalizer.v_scale})
    manifest = {
        "version": CHECKPOINT_VERSION,
        "architecture": asdict(arch),
        "train_config": asdict(train_config) if train_config else {},
        "adjacency_sha256": adjacency_hash,
        "extra": extra or {},
    }
    write_archive(path, CHECKPOINT_MAGIC, manifest, tensors)


def load_checkpoint(path, n: int | None = None, adjacency=None) -> Checkpoint:
    """Read a checkpoint; ``n`` and ``adjacency`` are checked when given."""
    try:
        manifest, tensors = read_archive(path, CHECKPOINT_MAGIC)
    except ArchiveError as exc:
        raise CheckpointError(str(exc)) from None
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {manifest.get('version')} is not supported "
                              f"(expected {CHECKPOINT_VERSION})")
    a = manifest["architecture"]
    arch = ArchitectureConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in a.items()})
    if n is not None and arch.n != n:
        raise CheckpointError(f"{path}: checkpoint was trained with n={arch.n} segments, the data has n={n}")
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    normalizer = Normalizer(tensors["normalizer/t_mean"], tensors["normalizer/t_std"], tensors["normalizer/v_scale"])
    fp = manifest["adjacency_sha256"]
    if adjacency is not None:
        supplied = adjacency if isinstance(adjacency, str) else adjacency_fingerprint(adjacency)
        if supplied != fp:
            warnings.warn(f"adjacency differs from the one the checkpoint was trained with "
                          f"({fp[:12]} vs {supplied[:12]})", AdjacencyMismatchWarning, stacklevel=2)
    return Checkpoint(arch, params, normalizer, fp, manifest.get("train_config", {}), manifest.get("extra", {}))
