"""Datasets: a planted-correlation synthetic generator, disk persistence,
and a small trainable convolutional backbone.

The generator's purpose is to make evidence-conditioned inference
measurable. Labels are driven by latent Bernoulli factors through a
loading matrix, and designated label pairs are coupled: the second member
copies the first with probability pair_correlation. Every label except
those second members adds a fixed spatial signal pattern to the feature
grid when positive, so second members are recoverable from features only
through their partner, and exactly from evidence when their partner's
state is revealed. That is the information gap the encoder is supposed
to exploit.

Directory layout written by save_dataset:

    manifest.jsonl   one JSON object per sample: {"id", "targets", "tags"}
    features.bin     one tensor blob per sample, in manifest order
    labels.json      label names, optional group map, target_count, flags
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import serialization, tensor as T
from .errors import ConfigurationError, FormatError, ShapeMismatchError

DATASET_FORMAT_VERSION = 1


@dataclass
class Dataset:
    """In-memory dataset: precomputed feature grids plus binary targets."""

    features: np.ndarray
    targets: np.ndarray
    sample_ids: list[str]
    label_names: list[str]
    groups: dict[str, tuple[int, ...]] | None = None
    target_count: int | None = None
    multi_class: bool = False

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.uint8)
        if self.targets.ndim != 2:
            raise ShapeMismatchError(f"targets must be [N, num_labels], got {self.targets.shape}")
        n, num_labels = self.targets.shape
        if len(self.sample_ids) != n:
            raise ConfigurationError(f"{len(self.sample_ids)} ids for {n} samples")
        if len(self.label_names) != num_labels:
            raise ConfigurationError(
                f"{len(self.label_names)} label names for {num_labels} target columns"
            )
        if len(set(self.sample_ids)) != n:
            raise ConfigurationError("sample ids must be unique")
        if not np.isin(self.targets, (0, 1)).all():
            raise ConfigurationError("targets must be binary")
        self.features = np.asarray(self.features)
        if self.features.ndim != 4 or self.features.shape[0] != n:
            raise ShapeMismatchError(
                f"features must be [N, h, w, d] with N={n}, got {self.features.shape}"
            )
        if self.groups is not None:
            self.groups = {k: tuple(v) for k, v in self.groups.items()}
        if self.multi_class:
            tc = self.num_target_labels
            if not (self.targets[:, :tc].sum(axis=1) == 1).all():
                raise ConfigurationError(
                    "multi_class datasets need exactly one positive target label per sample"
                )

    def __len__(self) -> int:
        return self.targets.shape[0]

    @property
    def num_labels(self) -> int:
        return self.targets.shape[1]

    @property
    def num_target_labels(self) -> int:
        return self.num_labels if self.target_count is None else self.target_count


def check_compatible(dataset: Dataset, model_config) -> None:
    """Explicit shape gate between a dataset and a model."""
    if dataset.num_labels != model_config.num_labels:
        raise ShapeMismatchError(
            f"dataset has {dataset.num_labels} labels but the model expects "
            f"{model_config.num_labels}"
        )
    if not model_config.no_image_ablation:
        want = (model_config.grid_h, model_config.grid_w, model_config.embed_dim)
        got = dataset.features.shape[1:]
        if got != want:
            raise ShapeMismatchError(f"feature grids are {got}, model expects {want}")


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one reproducible synthetic dataset (train + test split)."""

    num_labels: int
    num_latent_factors: int = 4
    loading: tuple | None = None  # explicit [factors, labels] matrix; seed-derived if None
    loading_scale: float = 3.0
    label_bias: float = -0.6
    coupled_pairs: tuple[tuple[int, int], ...] = ()
    pair_correlation: float = 0.0
    signal_strength: float = 1.0
    noise_level: float = 1.0
    train_count: int = 1000
    test_count: int = 200
    seed: int = 0
    grid_h: int = 3
    grid_w: int = 3
    feat_dim: int = 64
    groups: dict | None = None
    target_count: int | None = None

    def __post_init__(self):
        if self.num_labels < 1:
            raise ConfigurationError("num_labels must be positive")
        if self.num_latent_factors < 1:
            raise ConfigurationError("num_latent_factors must be positive")
        if not 0.0 <= self.pair_correlation <= 1.0:
            raise ConfigurationError(
                f"pair_correlation must be in [0, 1], got {self.pair_correlation}"
            )
        if self.signal_strength < 0 or self.noise_level < 0:
            raise ConfigurationError("signal_strength and noise_level must be non-negative")
        if self.train_count < 1 or self.test_count < 0:
            raise ConfigurationError("need at least one training sample")
        seen: set[int] = set()
        for a, b in self.coupled_pairs:
            if not (0 <= a < self.num_labels and 0 <= b < self.num_labels) or a == b:
                raise ConfigurationError(f"bad coupled pair ({a}, {b})")
            if a in seen or b in seen:
                raise ConfigurationError("coupled pairs must not share labels")
            seen.update((a, b))
        if self.loading is not None:
            mat = np.asarray(self.loading, dtype=np.float64)
            if mat.shape != (self.num_latent_factors, self.num_labels):
                raise ConfigurationError(
                    f"loading matrix must be [{self.num_latent_factors}, "
                    f"{self.num_labels}], got {mat.shape}"
                )

    def loading_matrix(self) -> np.ndarray:
        if self.loading is not None:
            return np.asarray(self.loading, dtype=np.float64)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xA]))
        scale = self.loading_scale / math.sqrt(self.num_latent_factors)
        return rng.uniform(-scale, scale, size=(self.num_latent_factors, self.num_labels))

    def silent_labels(self) -> np.ndarray:
        """Labels that emit no feature signal: second members of coupled pairs."""
        mask = np.zeros(self.num_labels, dtype=bool)
        for _, b in self.coupled_pairs:
            mask[b] = True
        return mask

    def to_dict(self) -> dict:
        d = {
            "num_labels": self.num_labels,
            "num_latent_factors": self.num_latent_factors,
            "loading": None if self.loading is None else np.asarray(self.loading).tolist(),
            "loading_scale": self.loading_scale,
            "label_bias": self.label_bias,
            "coupled_pairs": [list(p) for p in self.coupled_pairs],
            "pair_correlation": self.pair_correlation,
            "signal_strength": self.signal_strength,
            "noise_level": self.noise_level,
            "train_count": self.train_count,
            "test_count": self.test_count,
            "seed": self.seed,
            "grid_h": self.grid_h,
            "grid_w": self.grid_w,
            "feat_dim": self.feat_dim,
            "groups": None if self.groups is None else {k: list(v) for k, v in self.groups.items()},
            "target_count": self.target_count,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if d.get("loading") is not None:
            d["loading"] = tuple(tuple(row) for row in d["loading"])
        d["coupled_pairs"] = tuple(tuple(p) for p in d.get("coupled_pairs", ()))
        if d.get("groups") is not None:
            d["groups"] = {k: tuple(v) for k, v in d["groups"].items()}
        return cls(**d)


@dataclass(frozen=True)
class GeneratedData:
    train: Dataset
    test: Dataset


def _draw_targets(spec: SynthSpec, loading: np.ndarray, count: int,
                  rng: np.random.Generator) -> np.ndarray:
    factors = rng.random((count, spec.num_latent_factors)) < 0.5
    logits = spec.label_bias + factors.astype(np.float64) @ loading
    probs = 1.0 / (1.0 + np.exp(-logits))
    y = (rng.random((count, spec.num_labels)) < probs).astype(np.uint8)
    if spec.coupled_pairs:
        copy = rng.random((count, len(spec.coupled_pairs))) < spec.pair_correlation
        for j, (a, b) in enumerate(spec.coupled_pairs):
            y[copy[:, j], b] = y[copy[:, j], a]
    return y


def _render_features(spec: SynthSpec, y: np.ndarray, patterns: np.ndarray,
                     rng: np.random.Generator) -> np.ndarray:
    strengths = np.where(spec.silent_labels(), 0.0, spec.signal_strength)
    flat = (y * strengths) @ patterns.reshape(spec.num_labels, -1)
    noise = rng.standard_normal(flat.shape)
    grids = flat + spec.noise_level * noise
    shape = (y.shape[0], spec.grid_h, spec.grid_w, spec.feat_dim)
    return grids.reshape(shape).astype(np.float32)


def _signal_patterns(spec: SynthSpec) -> np.ndarray:
    """Per-label unit-norm spatial patterns, fixed across the split."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xB]))
    pats = rng.standard_normal((spec.num_labels, spec.grid_h, spec.grid_w, spec.feat_dim))
    norms = np.sqrt((pats.reshape(spec.num_labels, -1) ** 2).sum(axis=1))
    return pats / norms[:, None, None, None]


def generate(spec: SynthSpec) -> GeneratedData:
    """Deterministically produce disjoint train/test splits from one spec."""
    loading = spec.loading_matrix()
    patterns = _signal_patterns(spec)
    label_names = [f"label_{i:02d}" for i in range(spec.num_labels)]
    splits = {}
    for split, count, tag in (("train", spec.train_count, 0x1), ("test", spec.test_count, 0x2)):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, tag]))
        y = _draw_targets(spec, loading, count, rng)
        feats = _render_features(spec, y, patterns, rng)
        ids = [f"{split}-{i:05d}" for i in range(count)]
        splits[split] = Dataset(
            features=feats, targets=y, sample_ids=ids, label_names=label_names,
            groups=spec.groups, target_count=spec.target_count,
        )
    return GeneratedData(train=splits["train"], test=splits["test"])


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _sample_tags(ds: Dataset, row: np.ndarray) -> list[str]:
    if not ds.groups:
        return []
    return sorted(name for name, idxs in ds.groups.items() if row[list(idxs)].any())


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "manifest.jsonl", "w") as fh:
        for i, sid in enumerate(ds.sample_ids):
            fh.write(json.dumps(
                {"id": sid, "targets": ds.targets[i].tolist(),
                 "tags": _sample_tags(ds, ds.targets[i])},
                separators=(",", ":"),
            ) + "\n")
    with open(path / "features.bin", "wb") as fh:
        for i, sid in enumerate(ds.sample_ids):
            serialization.write_blob(fh, ds.features[i], sid)
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "labels": ds.label_names,
        "groups": None if ds.groups is None else {k: list(v) for k, v in ds.groups.items()},
        "target_count": ds.target_count,
        "multi_class": ds.multi_class,
    }
    (path / "labels.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    meta_path = path / "labels.json"
    if not meta_path.exists():
        raise FormatError(f"no dataset at {path} (missing labels.json)")
    meta = json.loads(meta_path.read_text())
    version = meta.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise FormatError(
            f"dataset format version {version!r} not supported "
            f"(this build reads version {DATASET_FORMAT_VERSION})"
        )
    ids, targets = [], []
    with open(path / "manifest.jsonl") as fh:
        for line in fh:
            row = json.loads(line)
            ids.append(row["id"])
            targets.append(row["targets"])
    feats = []
    with open(path / "features.bin", "rb") as fh:
        for sid in ids:
            name, arr = serialization.read_blob(fh)
            if name != sid:
                raise FormatError(f"features.bin out of order: expected {sid!r}, found {name!r}")
            feats.append(arr)
    if not ids:
        raise FormatError(f"dataset at {path} has no samples")
    return Dataset(
        features=np.stack(feats), targets=np.asarray(targets, dtype=np.uint8),
        sample_ids=ids, label_names=list(meta["labels"]),
        groups=meta.get("groups"), target_count=meta.get("target_count"),
        multi_class=bool(meta.get("multi_class", False)),
    )


# ---------------------------------------------------------------------------
# raw-image mode
# ---------------------------------------------------------------------------


class TinyBackbone:
    """conv3x3 -> relu -> conv3x3 -> relu -> average pool -> conv1x1.

    Maps [batch, in_channels, grid_h*pool, grid_w*pool] images to a
    [batch, grid_h, grid_w, embed_dim] feature grid, differentiably, so it
    can train jointly with the encoder. Stands in for the pretrained CNN
    used at full scale.
    """

    def __init__(self, in_channels: int, mid_channels: int, model_config,
                 pool: int = 2, rng: np.random.Generator | int | None = None):
        if pool < 1:
            raise ConfigurationError("pool must be >= 1")
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.in_channels = in_channels
        self.mid_channels = mid_channels
        self.pool = pool
        self.grid_h = model_config.grid_h
        self.grid_w = model_config.grid_w
        self.embed_dim = model_config.embed_dim
        dt = T.get_default_dtype()

        def uniform(fan_in, *shape):
            return rng.uniform(-1, 1, size=shape).astype(dt) / math.sqrt(fan_in)

        self.params = {
            "conv1_w": T.parameter(uniform(in_channels * 9, in_channels * 9, mid_channels), "conv1_w"),
            "conv1_b": T.parameter(np.zeros(mid_channels, dtype=dt), "conv1_b"),
            "conv2_w": T.parameter(uniform(mid_channels * 9, mid_channels * 9, mid_channels), "conv2_w"),
            "conv2_b": T.parameter(np.zeros(mid_channels, dtype=dt), "conv2_b"),
            "proj_w": T.parameter(uniform(mid_channels, mid_channels, self.embed_dim), "proj_w"),
            "proj_b": T.parameter(np.zeros(self.embed_dim, dtype=dt), "proj_b"),
        }

    @property
    def input_hw(self) -> tuple[int, int]:
        return self.grid_h * self.pool, self.grid_w * self.pool

    def _conv(self, x: T.Tensor, w: T.Tensor, b: T.Tensor, channels: int) -> T.Tensor:
        batch, _, h, w_ = x.shape
        cols = T.im2col(x, 3, 3)
        out = T.relu(T.add(T.matmul(cols, w), b))
        return T.permute(T.reshape(out, (batch, h, w_, channels)), (0, 3, 1, 2))

    def forward(self, images) -> T.Tensor:
        x = images if isinstance(images, T.Tensor) else T.tensor(images)
        hh, ww = self.input_hw
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2:] != (hh, ww):
            raise ShapeMismatchError(
                f"backbone expects [batch, {self.in_channels}, {hh}, {ww}], got {x.shape}"
            )
        batch = x.shape[0]
        x = self._conv(x, self.params["conv1_w"], self.params["conv1_b"], self.mid_channels)
        x = self._conv(x, self.params["conv2_w"], self.params["conv2_b"], self.mid_channels)
        k = self.pool
        x = T.reshape(x, (batch, self.mid_channels, self.grid_h, k, self.grid_w, k))
        x = T.scale(T.sum_axes(x, (3, 5)), 1.0 / (k * k))
        x = T.permute(x, (0, 2, 3, 1))
        return T.add(T.matmul(x, self.params["proj_w"]), self.params["proj_b"])
