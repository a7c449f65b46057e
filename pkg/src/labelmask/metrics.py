"""Evaluation: ranking and thresholded metrics, and the three inference
protocols (regular, partial-evidence, extra-label evidence).

Scoring discipline: a (image, label) pair enters the metrics only if the
protocol left that label unknown for that image. Known labels are evidence,
never targets, so corrupting their scores must not move any number here.

Average precision is the information-retrieval form: the mean, over
relevant items, of precision at that item's rank (descending score, ties
kept in original order). Thresholded metrics follow the per-class /
overall precision-recall-F1 formulas with a strict 0.5 threshold and an
optional top-k eligibility cut.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, check_compatible
from .errors import ConfigurationError, ProtocolError
from .model import LabelState, LabelTransformer

EVAL_CSV_VERSION = 1

VALID_EPSILONS = (0.0, 0.25, 0.5, 0.75)


# ---------------------------------------------------------------------------
# ranking metrics
# ---------------------------------------------------------------------------


def average_precision(scores: np.ndarray, relevance: np.ndarray) -> float:
    """AP of one ranked list; requires at least one relevant item."""
    scores = np.asarray(scores, dtype=np.float64)
    relevance = np.asarray(relevance)
    if scores.shape != relevance.shape or scores.ndim != 1:
        raise ConfigurationError(
            f"scores {scores.shape} and relevance {relevance.shape} must be equal-length vectors"
        )
    total_relevant = int(relevance.sum())
    if total_relevant == 0:
        raise ProtocolError("average precision is undefined without relevant items")
    order = np.argsort(-scores, kind="stable")
    ranked = relevance[order].astype(np.float64)
    cum = np.cumsum(ranked)
    precision_at = cum / np.arange(1, ranked.size + 1)
    return float((precision_at * ranked).sum() / total_relevant)


def mean_average_precision(scores: np.ndarray, targets: np.ndarray,
                           scored: np.ndarray) -> tuple[float, int]:
    """Mean AP over labels, each restricted to its scored (image, label) pairs.

    Labels with no scored pair or no relevant scored item are excluded;
    returns (mAP over the rest, excluded-label count).
    """
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    scored = np.asarray(scored, dtype=bool)
    if not scores.shape == targets.shape == scored.shape or scores.ndim != 2:
        raise ConfigurationError("scores, targets and scored mask must share an [N, labels] shape")
    aps = []
    excluded = 0
    for j in range(scores.shape[1]):
        rows = scored[:, j]
        if not rows.any() or targets[rows, j].sum() == 0:
            excluded += 1
            continue
        aps.append(average_precision(scores[rows, j], targets[rows, j]))
    if not aps:
        raise ProtocolError("every label was excluded; mAP undefined")
    return float(np.mean(aps)), excluded


# ---------------------------------------------------------------------------
# thresholded metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsCounts:
    """Per-label true-positive / predicted-positive / ground-truth-positive counts."""

    n_correct: np.ndarray
    n_predicted: np.ndarray
    n_ground: np.ndarray

    def __post_init__(self):
        c, p, g = (np.asarray(a, dtype=np.int64) for a in
                   (self.n_correct, self.n_predicted, self.n_ground))
        if not c.shape == p.shape == g.shape or c.ndim != 1:
            raise ConfigurationError("counts must be three equal-length vectors")
        if (c < 0).any() or (p < 0).any() or (g < 0).any():
            raise ConfigurationError("counts must be non-negative")
        if (c > np.minimum(p, g)).any():
            raise ConfigurationError("true positives cannot exceed predicted or ground positives")
        object.__setattr__(self, "n_correct", c)
        object.__setattr__(self, "n_predicted", p)
        object.__setattr__(self, "n_ground", g)

    @property
    def num_labels(self) -> int:
        return self.n_correct.size


def counts_from_binary(pred: np.ndarray, targets: np.ndarray,
                       scored: np.ndarray) -> MetricsCounts:
    pred = np.asarray(pred, dtype=bool)
    targets = np.asarray(targets, dtype=bool)
    scored = np.asarray(scored, dtype=bool)
    eligible_pred = pred & scored
    eligible_truth = targets & scored
    return MetricsCounts(
        n_correct=(eligible_pred & eligible_truth).sum(axis=0),
        n_predicted=eligible_pred.sum(axis=0),
        n_ground=eligible_truth.sum(axis=0),
    )


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


@dataclass(frozen=True)
class PRFMetrics:
    overall_precision: float
    overall_recall: float
    overall_f1: float
    class_precision: float
    class_recall: float
    class_f1: float
    zero_denominator_terms: int

    def as_tuple(self) -> tuple:
        return (self.class_precision, self.class_recall, self.class_f1,
                self.overall_precision, self.overall_recall, self.overall_f1)


def prf_metrics(counts: MetricsCounts) -> PRFMetrics:
    """Per-class and overall precision/recall/F1; zero-denominator terms
    contribute 0 and are tallied."""
    c, p, g = counts.n_correct, counts.n_predicted, counts.n_ground
    zero_terms = 0

    def ratio(num: float, den: float) -> float:
        nonlocal zero_terms
        if den == 0:
            zero_terms += 1
            return 0.0
        return num / den

    op = ratio(c.sum(), p.sum())
    orr = ratio(c.sum(), g.sum())
    cp = float(np.mean([ratio(c[i], p[i]) for i in range(counts.num_labels)]))
    cr = float(np.mean([ratio(c[i], g[i]) for i in range(counts.num_labels)]))
    return PRFMetrics(
        overall_precision=float(op), overall_recall=float(orr),
        overall_f1=float(_f1(op, orr)),
        class_precision=cp, class_recall=cr, class_f1=float(_f1(cp, cr)),
        zero_denominator_terms=zero_terms,
    )


def binarize(scores: np.ndarray, threshold: float = 0.5, top_k: int | None = None,
             eligible: np.ndarray | None = None) -> np.ndarray:
    """Score matrix -> binary prediction matrix.

    A label is positive iff its score is strictly above the threshold and,
    when top_k is given, it ranks among the k best eligible labels of its
    row (ties resolved toward the lower label index). ``eligible`` masks
    the candidate pool per row; ineligible labels are never positive.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ConfigurationError(f"scores must be [N, labels], got {scores.shape}")
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError(f"threshold must be in (0, 1), got {threshold}")
    n, num_labels = scores.shape
    if eligible is None:
        eligible = np.ones_like(scores, dtype=bool)
    else:
        eligible = np.asarray(eligible, dtype=bool)
        if eligible.shape != scores.shape:
            raise ConfigurationError("eligibility mask must match the score matrix shape")
    out = (scores > threshold) & eligible
    if top_k is not None:
        if top_k < 1 or top_k > num_labels:
            raise ConfigurationError(
                f"top_k must be in [1, {num_labels}], got {top_k}"
            )
        ranked = np.where(eligible, scores, -np.inf)
        keep = np.zeros_like(out)
        for i in range(n):
            order = np.argsort(-ranked[i], kind="stable")[:top_k]
            keep[i, order] = True
        out &= keep
    return out


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalProtocol:
    """Which labels are revealed as evidence at test time, and how to score.

    mode "regular": nothing known, every label scored. mode "partial":
    floor(epsilon * num_labels) labels per image become known with their
    ground-truth states. mode "extra": the named extra-label groups are
    fully known; only target labels are scored.
    """

    mode: str = "regular"
    epsilon: float = 0.0
    known_groups: tuple[str, ...] = ()
    selection_seed: int = 0
    threshold: float = 0.5
    top_k: int = 3

    def __post_init__(self):
        if self.mode not in ("regular", "partial", "extra"):
            raise ConfigurationError(f"unknown protocol mode {self.mode!r}")
        if self.mode == "partial":
            if self.epsilon not in VALID_EPSILONS:
                raise ConfigurationError(
                    f"epsilon must be one of {VALID_EPSILONS}, got {self.epsilon}"
                )
        elif self.epsilon != 0.0:
            raise ConfigurationError(f"epsilon applies only to partial mode, got {self.epsilon}")
        if self.known_groups and self.mode != "extra":
            raise ConfigurationError("known_groups apply only to extra mode")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.top_k < 1:
            raise ConfigurationError("top_k must be positive")
        object.__setattr__(self, "known_groups", tuple(self.known_groups))


def select_known(protocol: EvalProtocol, targets: np.ndarray,
                 groups: dict[str, tuple[int, ...]] | None,
                 target_count: int | None,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-image evidence selection: (states vector, scored boolean mask)."""
    targets = np.asarray(targets)
    num_labels = targets.shape[0]
    states = np.full(num_labels, LabelState.UNKNOWN, dtype=np.int8)
    truth = np.where(targets == 1, LabelState.POSITIVE, LabelState.NEGATIVE).astype(np.int8)

    if protocol.mode == "regular":
        return states, np.ones(num_labels, dtype=bool)

    if protocol.mode == "partial":
        k = int(protocol.epsilon * num_labels)
        scored = np.ones(num_labels, dtype=bool)
        if k > 0:
            known = rng.choice(num_labels, size=k, replace=False)
            states[known] = truth[known]
            scored[known] = False
        return states, scored

    if groups is None or target_count is None:
        raise ProtocolError("extra-label protocol needs a dataset with a label partition")
    for name in protocol.known_groups:
        if name not in groups:
            raise ProtocolError(
                f"unknown group {name!r}; dataset has {sorted(groups)}"
            )
        idxs = list(groups[name])
        states[idxs] = truth[idxs]
    scored = np.zeros(num_labels, dtype=bool)
    scored[:target_count] = True
    return states, scored


# ---------------------------------------------------------------------------
# evaluation driver
# ---------------------------------------------------------------------------


CSV_COLUMNS = [
    "csv_version", "mode", "epsilon", "known_groups", "selection_seed",
    "threshold", "top_k", "mAP", "excluded_labels",
    "CP", "CR", "CF1", "OP", "OR", "OF1",
    "CP_top3", "CR_top3", "CF1_top3", "OP_top3", "OR_top3", "OF1_top3",
    "accuracy",
]


@dataclass
class EvalReport:
    protocol: EvalProtocol
    mAP: float
    excluded_labels: int
    thresholded: PRFMetrics
    top_k: PRFMetrics
    accuracy: float | None
    per_label_ap: dict[str, float | None]

    def to_dict(self) -> dict:
        return {
            "protocol": {
                "mode": self.protocol.mode,
                "epsilon": self.protocol.epsilon,
                "known_groups": list(self.protocol.known_groups),
                "selection_seed": self.protocol.selection_seed,
                "threshold": self.protocol.threshold,
                "top_k": self.protocol.top_k,
            },
            "mAP": self.mAP,
            "excluded_labels": self.excluded_labels,
            "thresholded": {
                "CP": self.thresholded.class_precision,
                "CR": self.thresholded.class_recall,
                "CF1": self.thresholded.class_f1,
                "OP": self.thresholded.overall_precision,
                "OR": self.thresholded.overall_recall,
                "OF1": self.thresholded.overall_f1,
            },
            "top_k": {
                "CP": self.top_k.class_precision,
                "CR": self.top_k.class_recall,
                "CF1": self.top_k.class_f1,
                "OP": self.top_k.overall_precision,
                "OR": self.top_k.overall_recall,
                "OF1": self.top_k.overall_f1,
            },
            "accuracy": self.accuracy,
            "per_label_ap": self.per_label_ap,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_row(self) -> list[str]:
        def num(x):
            return "" if x is None else repr(float(x))

        return [
            str(EVAL_CSV_VERSION), self.protocol.mode, num(self.protocol.epsilon),
            "|".join(self.protocol.known_groups), str(self.protocol.selection_seed),
            num(self.protocol.threshold), str(self.protocol.top_k),
            num(self.mAP), str(self.excluded_labels),
            num(self.thresholded.class_precision), num(self.thresholded.class_recall),
            num(self.thresholded.class_f1), num(self.thresholded.overall_precision),
            num(self.thresholded.overall_recall), num(self.thresholded.overall_f1),
            num(self.top_k.class_precision), num(self.top_k.class_recall),
            num(self.top_k.class_f1), num(self.top_k.overall_precision),
            num(self.top_k.overall_recall), num(self.top_k.overall_f1),
            num(self.accuracy),
        ]


def protocol_states(protocol: EvalProtocol, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Evidence states and scored mask for every sample, in dataset order."""
    rng = np.random.default_rng(protocol.selection_seed)
    n = len(dataset)
    states = np.empty((n, dataset.num_labels), dtype=np.int8)
    scored = np.empty((n, dataset.num_labels), dtype=bool)
    for i in range(n):
        states[i], scored[i] = select_known(
            protocol, dataset.targets[i], dataset.groups, dataset.target_count, rng
        )
    return states, scored


def predict_scores(model: LabelTransformer, dataset: Dataset, states: np.ndarray,
                   batch_size: int = 64) -> np.ndarray:
    """Eval-mode probabilities for every sample under the given states."""
    n = len(dataset)
    out = np.empty((n, dataset.num_labels), dtype=np.float64)
    no_image = model.config.no_image_ablation
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        feats = None if no_image else dataset.features[lo:hi]
        out[lo:hi] = model.forward(feats, states[lo:hi]).probs
    return out


def evaluate(model: LabelTransformer, dataset: Dataset, protocol: EvalProtocol,
             batch_size: int = 64) -> EvalReport:
    check_compatible(dataset, model.config)
    if protocol.mode == "extra" and dataset.groups is None:
        raise ProtocolError("extra-label protocol needs a dataset with a label partition")
    states, scored = protocol_states(protocol, dataset)
    scores = predict_scores(model, dataset, states, batch_size=batch_size)
    targets = dataset.targets.astype(np.float64)

    map_value, excluded = mean_average_precision(scores, targets, scored)
    per_label: dict[str, float | None] = {}
    for j, name in enumerate(dataset.label_names):
        rows = scored[:, j]
        if not rows.any() or targets[rows, j].sum() == 0:
            per_label[name] = None
        else:
            per_label[name] = average_precision(scores[rows, j], targets[rows, j])

    thresholded = prf_metrics(counts_from_binary(
        binarize(scores, protocol.threshold, eligible=scored), targets, scored))
    k = min(protocol.top_k, dataset.num_labels)
    topk = prf_metrics(counts_from_binary(
        binarize(scores, protocol.threshold, top_k=k, eligible=scored), targets, scored))

    accuracy = None
    if dataset.multi_class:
        tc = dataset.num_target_labels
        accuracy = float(
            (scores[:, :tc].argmax(axis=1) == dataset.targets[:, :tc].argmax(axis=1)).mean()
        )

    return EvalReport(
        protocol=protocol, mAP=map_value, excluded_labels=excluded,
        thresholded=thresholded, top_k=topk, accuracy=accuracy,
        per_label_ap=per_label,
    )


def write_reports_csv(reports: list[EvalReport], path) -> None:
    import csv

    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for report in reports:
            writer.writerow(report.csv_row())
