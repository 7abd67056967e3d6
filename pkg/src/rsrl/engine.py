"""Repetitive self-revised learning loop.

Each round re-screens the *original* training set with the latest
network: a sample labeled with one of the three dominant classes is
dropped when the membership at its own label falls below that class's
threshold, then the network is retrained warm-started from the previous
round. The best round is the one maximizing total F-measure on the
evaluation set.
"""

from dataclasses import dataclass, replace

import numpy as np

from .dataset import Dataset, DatasetStats
from .errors import (
    BadConfig,
    EmptyDataset,
    EmptyResult,
    ShapeMismatch,
    SpecMismatch,
)
from .metrics import EvalSummary, evaluate_labels
from .net import (
    Checkpoint,
    NetworkSpec,
    TrainConfig,
    copy_params,
    default_network_spec,
    forward,
    forward_batch,
    init_checkpoint,
    params_equal,
    train,
)

# Thresholds start at 0.9 and tighten to 0.95 from the third round on.
DEFAULT_THRESHOLD_SCHEDULE = ((1, (0.9, 0.9, 0.9)), (3, (0.95, 0.95, 0.95)))

MEMBERSHIP_MODES = ("sigmoid", "softmax")

_FORWARD_CHUNK = 512


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def fc_memberships(net: Checkpoint, sample, mode: str = "sigmoid") -> np.ndarray:
    """Per-class membership values in (0, 1) for one sample.

    The default reads the raw pre-softmax class activations through a
    logistic sigmoid; ``mode="softmax"`` uses the softmax probabilities
    instead.
    """
    pixels = sample.pixels if hasattr(sample, "pixels") else sample
    acts = forward(net, pixels)
    if mode == "sigmoid":
        return sigmoid(acts.fc)
    if mode == "softmax":
        return acts.probabilities.copy()
    raise BadConfig(f"membership mode must be one of {MEMBERSHIP_MODES}, got {mode!r}")


def membership_matrix(net: Checkpoint, images, mode: str = "sigmoid") -> np.ndarray:
    """Row i holds the membership vector of images[i]; computed in chunks."""
    if mode not in MEMBERSHIP_MODES:
        raise BadConfig(f"membership mode must be one of {MEMBERSHIP_MODES}, got {mode!r}")
    images = np.asarray(images, dtype=np.float64)
    rows = []
    for start in range(0, images.shape[0], _FORWARD_CHUNK):
        outs = forward_batch(net, images[start : start + _FORWARD_CHUNK])
        rows.append(sigmoid(outs[-2]) if mode == "sigmoid" else outs[-1])
    return np.concatenate(rows, axis=0)


def predict(net: Checkpoint, images) -> np.ndarray:
    """Zero-based argmax class per image."""
    images = np.asarray(images, dtype=np.float64)
    parts = []
    for start in range(0, images.shape[0], _FORWARD_CHUNK):
        probs = forward_batch(net, images[start : start + _FORWARD_CHUNK])[-1]
        parts.append(np.argmax(probs, axis=1))
    return np.concatenate(parts)


def evaluate_checkpoint(net: Checkpoint, dataset: Dataset) -> EvalSummary:
    if len(dataset) == 0:
        raise EmptyDataset("evaluation set is empty")
    if dataset.n_classes != net.spec.n_classes:
        raise SpecMismatch(
            f"dataset has {dataset.n_classes} classes, network {net.spec.n_classes}"
        )
    x, y = dataset.arrays()
    return evaluate_labels(y, predict(net, x), dataset.n_classes)


def select_majority_classes(stats: DatasetStats) -> tuple:
    """Up to three most populated scores, descending count, ties toward
    the lower score; empty classes never qualify."""
    nonempty = [(score_idx + 1, count) for score_idx, count in enumerate(stats.counts) if count > 0]
    if not nonempty:
        raise EmptyDataset("no class has any samples")
    nonempty.sort(key=lambda item: (-item[1], item[0]))
    return tuple(score for score, _ in nonempty[:3])


@dataclass(frozen=True)
class DropPolicy:
    """Dominant classes (most frequent first) plus the per-round threshold
    schedule: steps of (from_round, thresholds), later steps overriding."""

    majority_classes: tuple
    schedule: tuple = DEFAULT_THRESHOLD_SCHEDULE

    def __post_init__(self):
        object.__setattr__(self, "majority_classes", tuple(self.majority_classes))
        object.__setattr__(
            self,
            "schedule",
            tuple((int(r), tuple(float(k) for k in ks)) for r, ks in self.schedule),
        )
        majors = self.majority_classes
        if not 1 <= len(majors) <= 3:
            raise BadConfig("between one and three majority classes required")
        if len(set(majors)) != len(majors):
            raise BadConfig("majority classes must be distinct")
        if not self.schedule:
            raise BadConfig("threshold schedule is empty")
        rounds = [r for r, _ in self.schedule]
        if rounds != sorted(rounds) or len(set(rounds)) != len(rounds):
            raise BadConfig("schedule steps must have strictly increasing rounds")
        for r, ks in self.schedule:
            if len(ks) < len(majors):
                raise BadConfig(f"schedule step {r} needs one threshold per majority class")
            if any(not 0.0 <= k <= 1.0 for k in ks):
                raise BadConfig("thresholds must lie in [0, 1]")

    def thresholds_for(self, round_index: int) -> tuple:
        chosen = None
        for start, ks in self.schedule:
            if round_index >= start:
                chosen = ks
        if chosen is None:
            raise BadConfig(f"round {round_index} precedes the threshold schedule")
        return chosen[: len(self.majority_classes)]


def revise_training_set(
    net: Checkpoint,
    original: Dataset,
    policy: DropPolicy,
    round_index: int,
    mode: str = "sigmoid",
):
    """One self-revision pass over the full original training set.

    Returns (revised dataset, dropped ids). A sample is dropped iff its
    label is the k-th majority class and its own-label membership under
    ``net`` is below that class's current threshold; everything else is
    retained, including samples dropped in earlier rounds.
    """
    if len(original) == 0:
        raise EmptyDataset("original training set is empty")
    x, y = original.arrays()
    memberships = membership_matrix(net, x, mode)
    own = memberships[np.arange(len(original)), y]
    thresholds = policy.thresholds_for(round_index)

    drop = np.zeros(len(original), dtype=bool)
    for rank, score in enumerate(policy.majority_classes):
        drop |= (y == score - 1) & (own < thresholds[rank])

    if drop.all():
        raise EmptyResult(f"round {round_index}: revision would drop all {len(original)} samples")
    keep_idx = np.flatnonzero(~drop)
    dropped_ids = tuple(original[i].id for i in np.flatnonzero(drop))
    return original.subset(keep_idx), dropped_ids


def warm_start_continuity(prev: Checkpoint, next_init: Checkpoint) -> bool:
    """True iff ``next_init`` starts bitwise-exactly from ``prev``'s
    parameters; raises when the two disagree on architecture."""
    if prev.spec != next_init.spec:
        raise SpecMismatch("checkpoints do not share a network spec")
    return params_equal(prev.params, next_init.params)


@dataclass(frozen=True)
class RsrlConfig:
    max_rounds: int = 30
    train: TrainConfig = TrainConfig()
    schedule: tuple = DEFAULT_THRESHOLD_SCHEDULE
    membership: str = "sigmoid"
    seed: int = 0

    def __post_init__(self):
        if self.max_rounds < 1:
            raise BadConfig("max rounds must be >= 1")
        if self.membership not in MEMBERSHIP_MODES:
            raise BadConfig(f"membership mode must be one of {MEMBERSHIP_MODES}")
        if self.seed < 0:
            raise BadConfig("seed must be non-negative")
        object.__setattr__(
            self,
            "schedule",
            tuple((int(r), tuple(float(k) for k in ks)) for r, ks in self.schedule),
        )

    def to_json_dict(self):
        return {
            "max_rounds": self.max_rounds,
            "epochs": self.train.epochs,
            "batch_size": self.train.batch_size,
            "learning_rate": self.train.learning_rate,
            "threshold_schedule": [
                {"from_round": r, "thresholds": list(ks)} for r, ks in self.schedule
            ],
            "membership": self.membership,
            "seed": self.seed,
        }


@dataclass
class RoundRecord:
    round_index: int
    revised_size: int
    dropped_ids: tuple
    checkpoint: Checkpoint
    summary: EvalSummary
    thresholds: tuple | None

    def to_json_dict(self, checkpoint_ref=None):
        return {
            "round": self.round_index,
            "revised_size": self.revised_size,
            "dropped_ids": list(self.dropped_ids),
            "checkpoint": checkpoint_ref,
            "thresholds": list(self.thresholds) if self.thresholds is not None else None,
            "summary": self.summary.to_json_dict(),
        }


@dataclass
class RsrlResult:
    history: list
    best_round: int

    @property
    def best_checkpoint(self) -> Checkpoint:
        return self.history[self.best_round].checkpoint


def best_round_index(history) -> int:
    """Argmax of total F-measure; ties resolve to the earliest round."""
    best = 0
    for rec in history[1:]:
        if rec.summary.total_f_measure > history[best].summary.total_f_measure:
            best = rec.round_index
    return best


def rsrl_run(
    train_set: Dataset,
    eval_set: Dataset,
    cfg: RsrlConfig,
    spec: NetworkSpec | None = None,
    on_round=None,
) -> RsrlResult:
    """Round 0 trains from a seeded init on the full training set; every
    later round re-screens the original set with the latest network,
    retrains warm-started, and is scored on ``eval_set``. Runs exactly
    ``cfg.max_rounds`` revision rounds and returns the full history plus
    the best round.

    ``on_round`` (if given) is called with each RoundRecord as soon as it
    is complete, so callers can persist partial progress.
    """
    if len(train_set) == 0 or len(eval_set) == 0:
        raise EmptyDataset("training and evaluation sets must be nonempty")
    if train_set.n_classes != eval_set.n_classes:
        raise SpecMismatch("training and evaluation sets disagree on class count")
    if train_set.image_shape != eval_set.image_shape:
        raise ShapeMismatch("training and evaluation sets disagree on image shape")
    if spec is None:
        spec = default_network_spec(train_set.image_shape, train_set.n_classes)
    elif spec.n_classes != train_set.n_classes:
        raise SpecMismatch("network spec class count does not match the dataset")

    policy = DropPolicy(
        majority_classes=select_majority_classes(train_set.stats()),
        schedule=cfg.schedule,
    )
    x_all, y_all = train_set.arrays()
    x_eval, y_eval = eval_set.arrays()
    train_cfg = replace(cfg.train, seed=cfg.seed)

    def scored(net):
        return evaluate_labels(y_eval, predict(net, x_eval), eval_set.n_classes)

    history = []

    def record(rec):
        history.append(rec)
        if on_round is not None:
            on_round(rec)

    net = train(init_checkpoint(spec, cfg.seed), x_all, y_all, train_cfg, round_index=0)
    record(
        RoundRecord(
            round_index=0,
            revised_size=len(train_set),
            dropped_ids=(),
            checkpoint=net,
            summary=scored(net),
            thresholds=None,
        )
    )

    for r in range(1, cfg.max_rounds + 1):
        try:
            revised, dropped = revise_training_set(net, train_set, policy, r, cfg.membership)
        except EmptyResult as exc:
            exc.history = history
            raise
        thresholds = policy.thresholds_for(r)
        warm = replace(net, params=copy_params(net.params), round_index=r)
        assert warm_start_continuity(net, warm)
        x_r, y_r = revised.arrays()
        net = train(warm, x_r, y_r, train_cfg, round_index=r)
        net = replace(net, thresholds=thresholds)
        record(
            RoundRecord(
                round_index=r,
                revised_size=len(revised),
                dropped_ids=dropped,
                checkpoint=net,
                summary=scored(net),
                thresholds=thresholds,
            )
        )

    return RsrlResult(history=history, best_round=best_round_index(history))
