"""
Training loop, evaluation and checkpoints.

One optimizer step takes a batch of whole records, runs one batched
forward pass over all of them, averages the per-query objective and applies an
Adam update. Everything that varies between runs is drawn from numpy
generators seeded by the configuration.
"""

import json
import logging
import math
import struct
from collections import OrderedDict

import numpy as np

from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from .config import TrainConfig
from .decoder import Reranker, forward_batch, rank
from .encoder import PromptLayout
from .metrics import UndefinedMetricError, mean, ndcg_at_k
from .model import AggregationStrategy, LossValue, RankingRecord
from .numerics import backward
from .objectives import TrainingDivergenceError, total_loss
from .params import ModelParams
from .utils import ConfigError, MvpError, map_ordered

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MVPC"
CHECKPOINT_VERSION = 1

Scorer = Callable[[RankingRecord], Sequence[float]]


class CheckpointError(MvpError):
    """Base class for checkpoint read failures."""


class IncompatibleCheckpointError(CheckpointError):
    """Exception raised for a file that is not a checkpoint of this version."""


class CheckpointIntegrityError(CheckpointError):
    """Exception raised for a truncated or inconsistent checkpoint."""


class Adam(object):
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        # type: (float, float, float) -> None
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {}  # type: Dict[str, np.ndarray]
        self._v = {}  # type: Dict[str, np.ndarray]

    def step(self, values, grads, lr):
        # type: (Dict[str, np.ndarray], Dict[str, np.ndarray], float) -> Dict[str, np.ndarray]
        """
        One update.

        Args:
            values: Current values by name.
            grads: Gradients by name, same shapes.
            lr: Learning rate of this step.

        Returns:
            Updated values by name, in the same order.
        """
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        updated = OrderedDict()
        for name, value in values.items():
            g = grads[name]
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(value)
                v = np.zeros_like(value)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self._m[name] = m
            self._v[name] = v
            updated[name] = value - lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
        return updated


class LinearWarmupSchedule(object):
    """Linear warm-up to the base rate, then linear decay to zero or a constant."""

    def __init__(self, base_lr, total_steps, warmup_ratio=0.05, decay="linear"):
        # type: (float, int, float, str) -> None
        self.base_lr = base_lr
        self.total_steps = max(int(total_steps), 1)
        self.warmup_steps = int(math.ceil(warmup_ratio * self.total_steps))
        self.decay = decay

    def __call__(self, step):
        # type: (int) -> float
        """Learning rate of the 0-based step."""
        if step < self.warmup_steps:
            return self.base_lr * (step + 1) / float(self.warmup_steps)
        if self.decay == "none":
            return self.base_lr
        remaining = self.total_steps - step
        span = self.total_steps - self.warmup_steps
        return self.base_lr * max(remaining, 0) / float(max(span, 1))


class EpochStats(object):
    """Mean losses of one epoch and the validation nDCG after it."""

    def __init__(self, epoch, rank_loss, orthogonal_loss, validation_ndcg=None, steps=0):
        # type: (int, float, float, Optional[float], int) -> None
        self.epoch = epoch
        self.rank_loss = rank_loss
        self.orthogonal_loss = orthogonal_loss
        self.validation_ndcg = validation_ndcg
        self.steps = steps

    def to_dict(self):
        # type: () -> Dict[str, Any]
        return OrderedDict([
            ("epoch", self.epoch),
            ("rank_loss", self.rank_loss),
            ("orthogonal_loss", self.orthogonal_loss),
            ("validation_ndcg", self.validation_ndcg),
            ("steps", self.steps),
        ])

    def __eq__(self, other):
        # type: (object) -> bool
        return isinstance(other, EpochStats) and self.to_dict() == other.to_dict()

    def __ne__(self, other):
        return not self == other

    def __repr__(self):
        # type: () -> str
        return "EpochStats({})".format(dict(self.to_dict()))


class TrainResult(object):
    """Trained parameters with their history and the generator state."""

    def __init__(self, params, history, step, rng_state, config):
        # type: (ModelParams, List[EpochStats], int, Dict[str, Any], TrainConfig) -> None
        self.params = params
        self.history = history
        self.step = step
        self.rng_state = rng_state
        self.config = config


def sample_candidates(record, k, rng):
    # type: (RankingRecord, int, np.random.Generator) -> RankingRecord
    """Random k candidates of a record, re-ranked 1..k; the record itself if n <= k."""
    if record.n <= k:
        return record
    chosen = sorted(int(i) for i in rng.choice(record.n, size=k, replace=False))
    return record.subset(chosen)


def batch_loss(params, batch, config, layout=None):
    # type: (ModelParams, Sequence[RankingRecord], TrainConfig, Optional[PromptLayout]) -> LossValue
    """Averaged objective of a batch, all records in one batched forward."""
    results = forward_batch([(record.query, record.passages()) for record in batch], params,
                            layout=layout)
    outputs = [(result.scores, result.anchors, record.ranks) for result, record in zip(results, batch)]
    return total_loss(outputs, temperature=config.temperature,
                      orthogonal_weight=config.orthogonal_weight)


def train_step(params, batch, config, optimizer, lr, layout=None):
    # type: (ModelParams, Sequence[RankingRecord], TrainConfig, Adam, float, Optional[PromptLayout]) -> Tuple[ModelParams, LossValue]
    """Forward, backward and one optimizer update."""
    loss = batch_loss(params, batch, config, layout)
    grads = backward(loss.total)
    gradient_arrays = OrderedDict((name, grads[tensor]) for name, tensor in params.items())
    updated = optimizer.step(params.arrays(), gradient_arrays, lr)
    return params.with_arrays(updated), loss


def train(config, records, validation=None, params=None):
    # type: (TrainConfig, Sequence[RankingRecord], Optional[Sequence[RankingRecord]], Optional[ModelParams]) -> TrainResult
    """
    Train a reranker.

    Args:
        config: Training configuration.
        records: Training records.
        validation: Records scored by nDCG@validation_k after every epoch.
        params: Starting point; a fresh initialization from config.seed
            when omitted.

    Returns:
        TrainResult with per-epoch history.

    Raises:
        ConfigError: If there are no training records.
        TrainingDivergenceError: Naming the step and the non-finite component.
    """
    config.validate()
    if not records:
        raise ConfigError("training needs at least one record")
    if params is None:
        params = ModelParams.from_train_config(config)
    rng = np.random.default_rng((config.seed, 1))
    layout = PromptLayout.from_config(params.encoder_config)
    steps_per_epoch = int(math.ceil(len(records) / float(config.batch_size)))
    schedule = LinearWarmupSchedule(config.learning_rate, config.epochs * steps_per_epoch,
                                    config.warmup_ratio, config.lr_decay)
    optimizer = Adam(config.beta1, config.beta2, config.adam_eps)
    logger.info("training %s on %d records, %d steps per epoch", params, len(records), steps_per_epoch)

    history = []  # type: List[EpochStats]
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(records))
        rank_losses = []
        orthogonal_losses = []
        for start in range(0, len(records), config.batch_size):
            batch = [sample_candidates(records[int(i)], config.candidates_per_record, rng)
                     for i in order[start:start + config.batch_size]]
            try:
                params, loss = train_step(params, batch, config, optimizer, schedule(step), layout)
            except TrainingDivergenceError as e:
                raise e.at_step(step)
            rank_losses.append(loss.rank_loss)
            orthogonal_losses.append(loss.orthogonal_loss)
            step += 1
        validation_ndcg = None
        if validation:
            validation_ndcg = evaluate(params, validation, config.validation_k)
        stats = EpochStats(epoch, mean(rank_losses), mean(orthogonal_losses),
                           validation_ndcg, len(rank_losses))
        logger.info("epoch %d: rank_loss=%.5f orthogonal_loss=%.5f validation_ndcg=%s",
                    epoch, stats.rank_loss, stats.orthogonal_loss,
                    "n/a" if validation_ndcg is None else "{:.4f}".format(validation_ndcg))
        history.append(stats)
    return TrainResult(params, history, step, rng.bit_generator.state, config)


def oracle_scorer(record):
    # type: (RankingRecord) -> np.ndarray
    """Scores equal to the planted relevance."""
    return np.asarray(record.gains(), dtype=np.float64)


def evaluate_scorer(scorer, records, k=10, threads=None):
    # type: (Scorer, Sequence[RankingRecord], int, Optional[int]) -> float
    """
    Mean nDCG@k of a scorer's rankings against the planted relevance.

    Records without positive relevance are skipped and counted in a warning.

    Raises:
        UndefinedMetricError: If no record has a defined nDCG.
    """
    def one(record):
        try:
            return ndcg_at_k(rank(scorer(record)), record.gains(), k)
        except UndefinedMetricError:
            return None

    values = map_ordered(one, list(records), threads=threads)
    defined = [v for v in values if v is not None]
    skipped = len(values) - len(defined)
    if skipped:
        logger.warning("skipped %d of %d records with undefined nDCG@%d", skipped, len(values), k)
    if not defined:
        raise UndefinedMetricError("no record has a defined nDCG@{}".format(k))
    return mean(defined)


def evaluate(params, records, k=10, strategy=None, threads=None):
    # type: (ModelParams, Sequence[RankingRecord], int, Optional[AggregationStrategy], Optional[int]) -> float
    """Mean nDCG@k of the model's rankings."""
    return evaluate_scorer(Reranker(params, strategy=strategy, threads=1), records, k, threads=threads)


def random_permutation_baseline(records, k=10, samples=100000, seed=0):
    # type: (Sequence[RankingRecord], int, int, int) -> float
    """
    Monte-Carlo mean nDCG@k of uniformly random orderings.

    Records with undefined nDCG are skipped, as in evaluate_scorer.
    """
    rng = np.random.default_rng(seed)
    per_record = []
    for record in records:
        gains = np.asarray(record.gains(), dtype=np.float64)
        n = gains.size
        cutoff = min(k, n)
        discounts = np.log2(np.arange(2, cutoff + 2))
        ideal = ((np.power(2.0, -np.sort(-gains)[:cutoff]) - 1.0) / discounts).sum()
        if ideal <= 0.0:
            continue
        orders = rng.permuted(np.tile(np.arange(n), (samples, 1)), axis=1)[:, :cutoff]
        dcg = ((np.power(2.0, gains[orders]) - 1.0) / discounts).sum(axis=1)
        per_record.append(float(dcg.mean() / ideal))
    if not per_record:
        raise UndefinedMetricError("no record has a defined nDCG@{}".format(k))
    return float(np.mean(per_record))


class Checkpoint(object):
    """Saved parameters with the configuration and training position."""

    def __init__(self, params, config, step=0, rng_state=None, version=CHECKPOINT_VERSION):
        # type: (ModelParams, TrainConfig, int, Optional[Dict[str, Any]], int) -> None
        self.params = params
        self.config = config
        self.step = step
        self.rng_state = rng_state
        self.version = version

    @classmethod
    def from_result(cls, result):
        # type: (TrainResult) -> Checkpoint
        return cls(result.params, result.config, result.step, result.rng_state)


def save_checkpoint(path, checkpoint):
    # type: (str, Checkpoint) -> None
    """
    Write MVPC, u32 version, u32 manifest length, the JSON manifest and the
    little-endian float64 payloads in manifest order.
    """
    names = checkpoint.params.names()
    manifest = OrderedDict([
        ("config", checkpoint.config.to_dict()),
        ("step", checkpoint.step),
        ("rng_state", checkpoint.rng_state),
        ("tensors", [OrderedDict([("name", name), ("dtype", "f64"),
                                  ("shape", list(checkpoint.params[name].shape))])
                     for name in names]),
    ])
    encoded = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(encoded)))
        f.write(encoded)
        for name in names:
            f.write(np.ascontiguousarray(checkpoint.params[name].data, dtype="<f8").tobytes())
    logger.info("saved checkpoint with %d tensors to %s", len(names), path)


def _take(blob, offset, size, what):
    # type: (bytes, int, int, str) -> bytes
    if offset + size > len(blob):
        raise CheckpointIntegrityError("checkpoint truncated while reading {}".format(what))
    return blob[offset:offset + size]


def parse_checkpoint(blob, config=None):
    # type: (bytes, Optional[TrainConfig]) -> Checkpoint
    """
    Decode checkpoint bytes.

    Args:
        blob: File contents.
        config: Configuration the tensors must fit; the stored one if omitted.

    Raises:
        IncompatibleCheckpointError: On a wrong magic or version.
        CheckpointIntegrityError: On truncation, a bad manifest, non-finite
            weights or a tensor whose shape does not fit the configuration.
    """
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise IncompatibleCheckpointError("not a checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    version, length = struct.unpack("<II", _take(blob, offset, 8, "header"))
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError("checkpoint version {} is not supported (expected {})".format(
            version, CHECKPOINT_VERSION
        ))
    offset += 8
    try:
        manifest = json.loads(_take(blob, offset, length, "manifest").decode("utf-8"))
        stored_config = TrainConfig(**manifest["config"])
        entries = [(e["name"], e["dtype"], tuple(int(s) for s in e["shape"])) for e in manifest["tensors"]]
        if not all(isinstance(name, str) for name, _, _ in entries):
            raise TypeError("tensor names must be strings")
        step = int(manifest["step"])
        rng_state = manifest.get("rng_state")
    except (ValueError, KeyError, TypeError, AttributeError, ConfigError) as e:
        raise CheckpointIntegrityError("checkpoint manifest is unreadable: {}".format(e))
    offset += length

    if config is None:
        config = stored_config
        try:
            expected = ModelParams.from_train_config(config)
        except (ValueError, MvpError) as e:
            raise CheckpointIntegrityError("stored configuration does not build a model: {}".format(e))
    else:
        expected = ModelParams.from_train_config(config)
    arrays = OrderedDict()
    for name, dtype, shape in entries:
        if dtype != "f64":
            raise CheckpointIntegrityError("tensor '{}' has unsupported dtype '{}'".format(name, dtype))
        if name not in expected:
            raise CheckpointIntegrityError("tensor '{}' does not belong to the configured model".format(name))
        if shape != expected[name].shape:
            raise CheckpointIntegrityError("tensor '{}' has shape {}, configuration expects {}".format(
                name, shape, expected[name].shape
            ))
        size = 8 * int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(_take(blob, offset, size, "tensor '{}'".format(name)),
                               dtype="<f8").reshape(shape).astype(np.float64)
        if not np.all(np.isfinite(values)):
            raise CheckpointIntegrityError("tensor '{}' holds non-finite values".format(name))
        arrays[name] = values
        offset += size
    if offset != len(blob):
        raise CheckpointIntegrityError("{} unexpected bytes after the last tensor".format(len(blob) - offset))
    missing = [name for name in expected.names() if name not in arrays]
    if missing:
        raise CheckpointIntegrityError("checkpoint lacks tensor '{}'".format(missing[0]))
    return Checkpoint(expected.with_arrays(arrays), config, step, rng_state, version)


def load_checkpoint(path, config=None):
    # type: (str, Optional[TrainConfig]) -> Checkpoint
    with open(path, "rb") as f:
        blob = f.read()
    checkpoint = parse_checkpoint(blob, config)
    logger.info("loaded checkpoint from %s (step %d)", path, checkpoint.step)
    return checkpoint
