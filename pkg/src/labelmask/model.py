"""State-augmented label transformer.

Every forward pass builds one token sequence per sample: P = grid_h*grid_w
feature tokens followed by one token per label. A label token is the sum of
that label's learned embedding and a learned evidence-state embedding
(unknown / negative / positive); the unknown row is structurally zero and
never trained, so an all-unknown pass sees the bare label embeddings. The
sequence runs through L post-norm multi-head self-attention layers with no
positional encoding (token order carries no information), and each label's
probability is read off its own output token by an independent
sigmoid head.

State assignments are plain integer arrays of LabelState values, shape
[batch, num_labels].
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import serialization, tensor as T
from .errors import (
    ConfigurationError,
    FormatError,
    NumericsError,
    ShapeMismatchError,
)


class LabelState(enum.IntEnum):
    """Evidence state of one label; values index the state embedding table."""

    UNKNOWN = 0
    NEGATIVE = 1
    POSITIVE = 2


def all_unknown_states(batch_size: int, num_labels: int) -> np.ndarray:
    return np.full((batch_size, num_labels), LabelState.UNKNOWN, dtype=np.int8)


@dataclass(frozen=True)
class LabelPartition:
    """Split of the label set into target labels and grouped extra labels.

    Indices [0, target_count) are targets; the groups must tile the
    remaining indices exactly. Extra labels are never scored, only offered
    as evidence.
    """

    target_count: int
    groups: dict[str, tuple[int, ...]]

    def __post_init__(self):
        object.__setattr__(
            self, "groups", {k: tuple(v) for k, v in self.groups.items()}
        )

    def validate(self, num_labels: int) -> None:
        if not 0 < self.target_count <= num_labels:
            raise ConfigurationError(
                f"target_count {self.target_count} out of range for {num_labels} labels"
            )
        extra = sorted(i for idxs in self.groups.values() for i in idxs)
        expected = list(range(self.target_count, num_labels))
        if extra != expected:
            raise ConfigurationError(
                "label groups must tile the extra-label index range exactly; "
                f"got {extra}, expected {expected}"
            )

    @property
    def extra_count(self) -> int:
        return sum(len(v) for v in self.groups.values())


@dataclass(frozen=True)
class ModelConfig:
    num_labels: int
    embed_dim: int = 64
    num_heads: int = 4
    num_layers: int = 2
    grid_h: int = 3
    grid_w: int = 3
    dropout_p: float = 0.1
    no_image_ablation: bool = False
    label_partition: LabelPartition | None = None

    def __post_init__(self):
        if self.num_labels < 1:
            raise ConfigurationError(f"num_labels must be positive, got {self.num_labels}")
        if self.embed_dim < 1 or self.num_heads < 1:
            raise ConfigurationError("embed_dim and num_heads must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.num_layers < 0:
            raise ConfigurationError(f"num_layers must be non-negative, got {self.num_layers}")
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigurationError("grid dimensions must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.label_partition is not None:
            self.label_partition.validate(self.num_labels)

    @property
    def num_patches(self) -> int:
        return 0 if self.no_image_ablation else self.grid_h * self.grid_w

    @classmethod
    def paper_scale(cls, num_labels: int, **overrides) -> "ModelConfig":
        """The published configuration: d=2048, 3 layers, 4 heads, 18x18 grid.

        Far too large for the test suite; provided for documentation and
        scaled-up runs.
        """
        base = dict(
            num_labels=num_labels, embed_dim=2048, num_heads=4, num_layers=3,
            grid_h=18, grid_w=18, dropout_p=0.1,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = {
            "num_labels": self.num_labels,
            "embed_dim": self.embed_dim,
            "num_heads": self.num_heads,
            "num_layers": self.num_layers,
            "grid_h": self.grid_h,
            "grid_w": self.grid_w,
            "dropout_p": self.dropout_p,
            "no_image_ablation": self.no_image_ablation,
        }
        if self.label_partition is not None:
            d["label_partition"] = {
                "target_count": self.label_partition.target_count,
                "groups": {k: list(v) for k, v in self.label_partition.groups.items()},
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        part = d.pop("label_partition", None)
        if part is not None:
            d["label_partition"] = LabelPartition(
                target_count=part["target_count"],
                groups={k: tuple(v) for k, v in part["groups"].items()},
            )
        return cls(**d)


@dataclass
class Prediction:
    """Per-label probabilities for one batch, plus the logits that made them.

    probs is a float64 [batch, num_labels] array with entries strictly
    inside (0, 1); logits stays on the autodiff graph so training can build
    its loss from the same forward pass.
    """

    probs: np.ndarray
    logits: T.Tensor

    def single(self) -> np.ndarray:
        if self.probs.shape[0] != 1:
            raise ShapeMismatchError(f"single() on batch of {self.probs.shape[0]}")
        return self.probs[0]


_PROB_LO = np.nextafter(0.0, 1.0)
_PROB_HI = np.nextafter(1.0, 0.0)


def _layer_param_names(i: int) -> list[str]:
    return [
        f"layer{i}.attn_wq", f"layer{i}.attn_wk", f"layer{i}.attn_wv",
        f"layer{i}.attn_mix",
        f"layer{i}.ffn_w1", f"layer{i}.ffn_b1", f"layer{i}.ffn_w2", f"layer{i}.ffn_b2",
        f"layer{i}.ln1_gamma", f"layer{i}.ln1_beta",
        f"layer{i}.ln2_gamma", f"layer{i}.ln2_beta",
    ]


class LabelTransformer:
    """The trainable network plus its label names.

    Parameters live in ``self.params`` (name -> Tensor leaf). The unknown
    state row is not among them: the 3-row state table is assembled every
    forward pass from a constant zero row and the trainable negative /
    positive rows, so no optimizer step can move it.
    """

    def __init__(self, config: ModelConfig, label_names: list[str] | None = None,
                 rng: np.random.Generator | int | None = None):
        if label_names is None:
            label_names = [f"label_{i}" for i in range(config.num_labels)]
        if len(label_names) != config.num_labels:
            raise ConfigurationError(
                f"{len(label_names)} label names for {config.num_labels} labels"
            )
        if len(set(label_names)) != len(label_names):
            raise ConfigurationError("label names must be unique")
        self.config = config
        self.label_names = list(label_names)
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.params = self._init_params(rng)

    def _init_params(self, rng: np.random.Generator) -> dict[str, T.Tensor]:
        cfg = self.config
        d = cfg.embed_dim
        bound = 1.0 / math.sqrt(d)
        dt = T.get_default_dtype()

        def uniform(*shape):
            return rng.uniform(-bound, bound, size=shape).astype(dt)

        params: dict[str, T.Tensor] = {}
        params["label_table"] = T.parameter(uniform(cfg.num_labels, d), "label_table")
        params["state_rows"] = T.parameter(uniform(2, d), "state_rows")
        for i in range(cfg.num_layers):
            params[f"layer{i}.attn_wq"] = T.parameter(uniform(d, d))
            params[f"layer{i}.attn_wk"] = T.parameter(uniform(d, d))
            params[f"layer{i}.attn_wv"] = T.parameter(uniform(d, d))
            params[f"layer{i}.attn_mix"] = T.parameter(uniform(d, d))
            params[f"layer{i}.ffn_w1"] = T.parameter(uniform(d, d))
            params[f"layer{i}.ffn_b1"] = T.parameter(np.zeros(d, dtype=dt))
            params[f"layer{i}.ffn_w2"] = T.parameter(uniform(d, d))
            params[f"layer{i}.ffn_b2"] = T.parameter(np.zeros(d, dtype=dt))
            params[f"layer{i}.ln1_gamma"] = T.parameter(np.ones(d, dtype=dt))
            params[f"layer{i}.ln1_beta"] = T.parameter(np.zeros(d, dtype=dt))
            params[f"layer{i}.ln2_gamma"] = T.parameter(np.ones(d, dtype=dt))
            params[f"layer{i}.ln2_beta"] = T.parameter(np.zeros(d, dtype=dt))
        params["cls_w"] = T.parameter(uniform(cfg.num_labels, d), "cls_w")
        params["cls_b"] = T.parameter(np.zeros(cfg.num_labels, dtype=dt), "cls_b")
        for name, p in params.items():
            p.name = name
        return params

    # -- forward pieces ----------------------------------------------------

    def state_table(self) -> T.Tensor:
        """[3, d] table with the unknown row pinned at exactly zero."""
        zero_row = T.tensor(np.zeros((1, self.config.embed_dim),
                                     dtype=self.params["state_rows"].data.dtype))
        return T.concat([zero_row, self.params["state_rows"]], axis=0)

    def _check_states(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states)
        if states.ndim != 2 or states.shape[1] != self.config.num_labels:
            raise ShapeMismatchError(
                f"state assignment must be [batch, {self.config.num_labels}], got {states.shape}"
            )
        if states.min() < 0 or states.max() > 2:
            raise ConfigurationError("states must be 0 (unknown), 1 (negative) or 2 (positive)")
        return states.astype(np.int64)

    def embed(self, features, states: np.ndarray) -> T.Tensor:
        """Token sequence [batch, P + num_labels, d] (just labels in the ablation)."""
        cfg = self.config
        states = self._check_states(states)
        batch = states.shape[0]
        label_idx = np.broadcast_to(np.arange(cfg.num_labels), (batch, cfg.num_labels))
        label_tok = T.gather_rows(self.params["label_table"], label_idx)
        state_tok = T.gather_rows(self.state_table(), states)
        label_tok = T.add(label_tok, state_tok)
        if cfg.no_image_ablation:
            if features is not None:
                raise ConfigurationError("no_image_ablation model takes no features")
            return label_tok
        if features is None:
            raise ConfigurationError("this model requires a feature grid (or enable no_image_ablation)")
        feats = features if isinstance(features, T.Tensor) else T.tensor(features)
        expected = (batch, cfg.grid_h, cfg.grid_w, cfg.embed_dim)
        if feats.shape != expected:
            raise ShapeMismatchError(f"features must be {expected}, got {feats.shape}")
        patch_tok = T.reshape(feats, (batch, cfg.num_patches, cfg.embed_dim))
        return T.concat([patch_tok, label_tok], axis=1)

    def encoder_layer(self, x: T.Tensor, i: int, train: bool,
                      rng: np.random.Generator | None) -> T.Tensor:
        cfg = self.config
        p = self.params
        batch, m, d = x.shape
        heads, dh = cfg.num_heads, d // cfg.num_heads

        def split(t):
            return T.permute(T.reshape(t, (batch, m, heads, dh)), (0, 2, 1, 3))

        q = split(T.matmul(x, p[f"layer{i}.attn_wq"]))
        k = split(T.matmul(x, p[f"layer{i}.attn_wk"]))
        v = split(T.matmul(x, p[f"layer{i}.attn_wv"]))
        scores = T.scale(T.matmul(q, T.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = T.softmax_lastdim(scores)
        attn = T.dropout(attn, cfg.dropout_p, train, rng)
        ctx = T.reshape(T.permute(T.matmul(attn, v), (0, 2, 1, 3)), (batch, m, d))
        mixed = T.matmul(ctx, p[f"layer{i}.attn_mix"])
        x1 = T.layer_norm(T.add(x, mixed), p[f"layer{i}.ln1_gamma"], p[f"layer{i}.ln1_beta"])
        hidden = T.relu(T.add(T.matmul(x1, p[f"layer{i}.ffn_w1"]), p[f"layer{i}.ffn_b1"]))
        hidden = T.dropout(hidden, cfg.dropout_p, train, rng)
        ffn = T.add(T.matmul(hidden, p[f"layer{i}.ffn_w2"]), p[f"layer{i}.ffn_b2"])
        return T.layer_norm(T.add(x1, ffn), p[f"layer{i}.ln2_gamma"], p[f"layer{i}.ln2_beta"])

    def encode(self, h: T.Tensor, train: bool = False,
               rng: np.random.Generator | None = None) -> T.Tensor:
        for i in range(self.config.num_layers):
            h = self.encoder_layer(h, i, train, rng)
            if not np.isfinite(h.data).all():
                raise NumericsError(f"non-finite activations after encoder layer {i}")
        return h

    def classify(self, h: T.Tensor) -> T.Tensor:
        """Per-label logits [batch, num_labels] from the label tokens of h."""
        cfg = self.config
        label_tok = T.narrow(h, 1, cfg.num_patches, cfg.num_labels)
        weighted = T.mul(label_tok, self.params["cls_w"])
        return T.add(T.sum_axes(weighted, (-1,)), self.params["cls_b"])

    def forward(self, features, states: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> Prediction:
        if train and self.config.dropout_p > 0.0 and rng is None:
            raise ConfigurationError("training forward with dropout needs an rng")
        h = self.embed(features, states)
        h = self.encode(h, train=train, rng=rng)
        logits = self.classify(h)
        probs = _sigmoid64(logits.data)
        return Prediction(probs=probs, logits=logits)

    # -- persistence ---------------------------------------------------------

    def to_tensors(self) -> dict[str, np.ndarray]:
        """Checkpoint view: the state table appears assembled, unknown row included."""
        out = {}
        for name, p in self.params.items():
            if name == "state_rows":
                out["state_table"] = self.state_table().data.copy()
            else:
                out[name] = p.data.copy()
        return out

    def _checkpoint_meta(self) -> dict:
        return {"config": self.config.to_dict(), "label_names": self.label_names}

    def save(self, path) -> None:
        serialization.write_checkpoint(path, self.to_tensors(), self._checkpoint_meta())

    @classmethod
    def load(cls, path) -> "LabelTransformer":
        tensors, meta = serialization.read_checkpoint(path)
        config = ModelConfig.from_dict(meta["config"])
        model = cls.__new__(cls)
        model.config = config
        model.label_names = list(meta["label_names"])
        if len(model.label_names) != config.num_labels:
            raise FormatError("checkpoint label names disagree with config")
        state_table = tensors.pop("state_table", None)
        if state_table is None:
            raise FormatError("checkpoint is missing the state table")
        if state_table.shape[0] != 3 or np.any(state_table[0] != 0.0):
            raise FormatError("checkpoint state table must have an all-zero unknown row")
        expected = ["label_table", "state_rows"]
        for i in range(config.num_layers):
            expected.extend(_layer_param_names(i))
        expected.extend(["cls_w", "cls_b"])
        params = {}
        for name in expected:
            if name == "state_rows":
                params[name] = T.parameter(np.ascontiguousarray(state_table[1:]), name)
                continue
            if name not in tensors:
                raise FormatError(f"checkpoint is missing tensor {name!r}")
            params[name] = T.parameter(tensors[name], name)
        model.params = params
        return model

    def export_label_embeddings(self, path) -> None:
        """Blob of the [num_labels, d] table plus a JSON label-name manifest."""
        path = Path(path)
        with open(path, "wb") as fh:
            serialization.write_blob(fh, self.params["label_table"].data, "label_table")
        manifest = path.with_suffix(".labels.json")
        manifest.write_text(json.dumps({"labels": self.label_names}, indent=2) + "\n")


def _sigmoid64(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64, copy=False)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return np.clip(out, _PROB_LO, _PROB_HI)
