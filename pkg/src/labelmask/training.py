"""Masked-label training.

Each training step hides a random subset of every sample's labels: the
hidden labels get the Unknown state and are the only ones scored by the
loss; the rest carry their ground-truth Positive/Negative state into the
encoder as evidence. The subset size n is uniform on the integer range
[ceil(min_fraction * num_labels), num_labels] and the subset itself is a
uniform n-subset, one fresh draw per sample per step. Disabling masked
training (the ablation) makes every label Unknown and scored, which is
plain BCE over the full label set.

Optimization is Adam with bias correction and no weight decay. The loss
per batch is the mean over samples of the mean over that sample's unknown
labels, so the step size does not depend on how many labels were hidden.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, NumericsError, ProtocolError
from .model import LabelState, LabelTransformer

__all__ = [
    "MaskSpec", "TrainConfig", "TrainResult", "sample_mask", "build_states",
    "masked_bce", "unknown_marginal", "Adam", "train",
]


@dataclass(frozen=True)
class MaskSpec:
    """How many labels to hide per step and the floor on that count."""

    num_labels: int
    min_fraction: float = 0.25

    def __post_init__(self):
        if self.num_labels < 1:
            raise ConfigurationError(f"num_labels must be positive, got {self.num_labels}")
        if not 0.0 < self.min_fraction <= 1.0:
            raise ConfigurationError(f"min_fraction must be in (0, 1], got {self.min_fraction}")

    @property
    def min_unknown(self) -> int:
        return max(1, math.ceil(self.min_fraction * self.num_labels))


def sample_mask(spec: MaskSpec, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Draw (sorted unknown-index array, n)."""
    n = int(rng.integers(spec.min_unknown, spec.num_labels + 1))
    idx = rng.choice(spec.num_labels, size=n, replace=False)
    idx.sort()
    return idx, n


def build_states(targets: np.ndarray, unknown: np.ndarray) -> np.ndarray:
    """Ternary states: Unknown on the index set, ground truth elsewhere."""
    targets = np.asarray(targets)
    states = np.where(targets == 1, LabelState.POSITIVE, LabelState.NEGATIVE).astype(np.int8)
    states[..., unknown] = LabelState.UNKNOWN
    return states


def unknown_marginal(spec: MaskSpec) -> float:
    """Exact P(a given label is unknown) under the sampling scheme.

    For each n the subset is uniform, so the per-label probability is
    n / num_labels; n itself is uniform on [min_unknown, num_labels].
    Used as the oracle for the mask-marginal test.
    """
    ns = np.arange(spec.min_unknown, spec.num_labels + 1)
    return float((ns / spec.num_labels).mean())


def masked_bce(prediction, targets: np.ndarray, unknown: np.ndarray) -> T.Tensor:
    """Mean BCE over the unknown labels of one sample.

    Known labels get weight zero, which the loss primitive turns into an
    exactly-zero contribution and an exactly-zero logit gradient.
    """
    targets = np.asarray(targets, dtype=np.float64)
    unknown = np.asarray(unknown)
    if unknown.size == 0:
        raise ProtocolError("masked loss needs a non-empty unknown set")
    logits = prediction.logits
    if logits.ndim == 2:
        if logits.shape[0] != 1:
            raise ProtocolError("masked_bce scores one sample; use the training loop for batches")
        logits = T.reshape(logits, (logits.shape[1],))
    weights = np.zeros(logits.shape[0])
    weights[unknown] = 1.0 / unknown.size
    return T.bce_with_logits(logits, targets.reshape(-1), weights)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 16
    epochs: int = 10
    lmt_enabled: bool = True
    min_unknown_fraction: float = 0.25
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigurationError(f"betas must lie in [0, 1), got {self.betas}")
        if self.weight_decay != 0.0:
            raise ConfigurationError("weight decay is fixed at zero in this model")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype}")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["betas"] = tuple(d.get("betas", (0.9, 0.999)))
        return cls(**d)

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        """Published optimizer settings (lr 1e-5, batch 16); for documentation."""
        base = dict(learning_rate=1e-5, batch_size=16)
        base.update(overrides)
        return cls(**base)


class Adam:
    """Adam with bias correction; skips parameters whose gradient is absent."""

    def __init__(self, params: dict[str, T.Tensor], config: TrainConfig):
        self.params = params
        self.lr = config.learning_rate
        self.b1, self.b2 = config.betas
        self.eps = config.adam_eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericsError(f"non-finite gradient for parameter {name!r}")
            g = g.astype(p.data.dtype, copy=False)
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            p.data = p.data - (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def zero_grads(self) -> None:
        T.zero_grads(self.params)


@dataclass
class TrainResult:
    model: LabelTransformer
    loss_trace: list[tuple[int, int, float]]
    final_path: Path | None
    best_path: Path | None
    best_loss: float


def _epoch_mean(trace: list[tuple[int, int, float]], epoch: int) -> float:
    vals = [loss for e, _, loss in trace if e == epoch]
    return float(np.mean(vals))


def train(model: LabelTransformer, features: np.ndarray, targets: np.ndarray,
          config: TrainConfig, run_dir=None) -> TrainResult:
    """Optimize the model in place; optionally persist a run directory.

    features: [N, grid_h, grid_w, d] (ignored entry-wise if the model is the
    no-image ablation, in which case it may be None). targets: [N, num_labels]
    in {0,1}. The run directory, when given, receives config.json, a
    loss_trace.csv with one row per optimizer step, and final/best
    checkpoints.
    """
    num_labels = model.config.num_labels
    targets = np.asarray(targets)
    if targets.ndim != 2 or targets.shape[1] != num_labels:
        raise ConfigurationError(f"targets must be [N, {num_labels}], got {targets.shape}")
    n_samples = targets.shape[0]
    if n_samples == 0:
        raise ConfigurationError("training needs a non-empty dataset")
    no_image = model.config.no_image_ablation
    if not no_image:
        features = np.asarray(features)
        if features.shape[0] != n_samples:
            raise ConfigurationError(
                f"{features.shape[0]} feature grids for {n_samples} targets"
            )

    spec = MaskSpec(num_labels, config.min_unknown_fraction)
    master = np.random.default_rng(config.seed)
    shuffle_rng = np.random.default_rng(master.integers(1 << 63))
    mask_rng = np.random.default_rng(master.integers(1 << 63))
    dropout_rng = np.random.default_rng(master.integers(1 << 63))

    optimizer = Adam(model.params, config)
    trace: list[tuple[int, int, float]] = []
    best_loss = math.inf
    best_path = final_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(
            {"train": config.to_dict(), "model": model.config.to_dict()},
            indent=2, sort_keys=True) + "\n")
        best_path = run_dir / "checkpoint_best.ckpt"
        final_path = run_dir / "checkpoint_final.ckpt"

    step = 0
    with T.using_dtype(config.dtype):
        for epoch in range(config.epochs):
            order = shuffle_rng.permutation(n_samples)
            for lo in range(0, n_samples, config.batch_size):
                batch_idx = order[lo:lo + config.batch_size]
                bsz = batch_idx.size
                y = targets[batch_idx].astype(np.float64)
                states = np.full((bsz, num_labels), LabelState.UNKNOWN, dtype=np.int8)
                weights = np.zeros((bsz, num_labels))
                if config.lmt_enabled:
                    for row in range(bsz):
                        unknown, n = sample_mask(spec, mask_rng)
                        states[row] = build_states(y[row], unknown)
                        weights[row, unknown] = 1.0 / n
                else:
                    weights[:] = 1.0 / num_labels
                weights /= bsz

                feats = None if no_image else features[batch_idx]
                optimizer.zero_grads()
                with T.Tape() as tape:
                    pred = model.forward(feats, states, train=True, rng=dropout_rng)
                    loss = T.bce_with_logits(pred.logits, y, weights)
                loss_val = float(loss.data)
                if not math.isfinite(loss_val):
                    raise NumericsError(f"training diverged: non-finite loss at step {step}")
                tape.backward(loss)
                optimizer.step()
                step += 1
                trace.append((epoch, step, loss_val))

            epoch_loss = _epoch_mean(trace, epoch)
            if best_path is not None and epoch_loss < best_loss:
                model.save(best_path)
            best_loss = min(best_loss, epoch_loss)

    if run_dir is not None:
        model.save(final_path)
        if not best_path.exists():
            model.save(best_path)
        with open(run_dir / "loss_trace.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "step", "loss"])
            writer.writerows(trace)

    return TrainResult(model=model, loss_trace=trace, final_path=final_path,
                       best_path=best_path, best_loss=best_loss)
