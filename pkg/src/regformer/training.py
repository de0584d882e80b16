"""Optimization loop: temperature-sampled directions, inverse-sqrt schedule, target-only loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .batching import PackedBatch, pack_instances
from .corpus import LanguageSet, SyntheticCorpus, TranslationInstance
from .errors import ConfigurationError, EmptyLossError, NonFiniteError
from .model import ModelParams, forward
from .tensor import AdamState


@dataclass
class TrainConfig:
    lr_peak: float = 5e-4
    warmup_steps: int = 400
    max_steps: int = 5000
    batch_tokens: int = 2048
    label_smoothing: float = 0.1
    sampling_temperature: float = 5.0
    seed: int = 1234
    mode: str = "full"
    lora_rank: int = 8
    clip_norm: float = 1.0
    accum_steps: int = 1
    valid_interval: int = 500
    average_last: int = 5

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigurationError("warmup_steps must be >= 1")
        if not self.sampling_temperature > 0:
            raise ConfigurationError("sampling temperature must be positive")
        if self.mode not in ("full", "lora"):
            raise ConfigurationError(f"mode must be 'full' or 'lora', got {self.mode!r}")
        if self.accum_steps < 1:
            raise ConfigurationError("accum_steps must be >= 1")


@dataclass
class TrainLog:
    steps: list[tuple[int, float, float]] = field(default_factory=list)
    valid: list[tuple[int, float]] = field(default_factory=list)

    def log_step(self, step: int, lr: float, loss: float) -> None:
        if self.steps and step <= self.steps[-1][0]:
            raise ValueError(f"step {step} is not after {self.steps[-1][0]}")
        self.steps.append((step, lr, loss))

    def train_csv(self) -> str:
        rows = ["step,lr,train_loss"] + [f"{s},{lr!r},{loss!r}" for s, lr, loss in self.steps]
        return "\n".join(rows) + "\n"

    def valid_csv(self) -> str:
        rows = ["epoch,valid_loss"] + [f"{e},{loss!r}" for e, loss in self.valid]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_csv(cls, train_text: str, valid_text: str) -> "TrainLog":
        log = cls()
        for line in train_text.strip().splitlines()[1:]:
            s, lr, loss = line.split(",")
            log.steps.append((int(s), float(lr), float(loss)))
        for line in valid_text.strip().splitlines()[1:]:
            e, loss = line.split(",")
            log.valid.append((int(e), float(loss)))
        return log


def lr_schedule(step: int, lr_peak: float, warmup: int) -> float:
    """Linear warmup to ``lr_peak``, then decay with 1/sqrt(step)."""
    if step < 1:
        raise ConfigurationError(f"steps are 1-based, got {step}")
    if step <= warmup:
        return lr_peak * step / warmup
    return lr_peak * math.sqrt(warmup / step)


def direction_probabilities(sizes: dict[tuple[int, int], int], temperature: float) -> tuple[list, np.ndarray]:
    if not sizes:
        raise ConfigurationError("no directions to sample from")
    edges = sorted(sizes)
    counts = np.array([sizes[e] for e in edges], dtype=float)
    if np.any(counts <= 0):
        raise ConfigurationError("every direction needs a positive size")
    w = counts ** (1.0 / temperature)
    return edges, w / w.sum()


def sample_direction(sizes: dict[tuple[int, int], int], temperature: float, rng: np.random.Generator):
    """Draw one direction with probability proportional to size ** (1 / T)."""
    edges, probs = direction_probabilities(sizes, temperature)
    return edges[int(rng.choice(len(edges), p=probs))]


class BatchSampler:
    """Token-budget batches drawn by temperature sampling, bucketed by source length.

    A pool of ``pool_batches`` batches' worth of instances is drawn, sorted by
    source length, cut into budget-sized batches and handed out in shuffled
    order. All randomness comes from the ``rng`` passed to :meth:`next`.
    """

    def __init__(self, corpus: SyntheticCorpus, temperature: float, batch_tokens: int, pool_batches: int = 8):
        self.by_direction = corpus.by_direction("train")
        sizes = {d: len(v) for d, v in self.by_direction.items()}
        self.edges, self.probs = direction_probabilities(sizes, temperature)
        self.batch_tokens = batch_tokens
        self.pool_batches = pool_batches
        self.queue: list[list[TranslationInstance]] = []

    def _fill(self, rng: np.random.Generator) -> None:
        budget = self.batch_tokens * self.pool_batches
        pool: list[TranslationInstance] = []
        used = 0
        while used < budget:
            edge = self.edges[int(rng.choice(len(self.edges), p=self.probs))]
            bucket = self.by_direction[edge]
            inst = bucket[int(rng.integers(len(bucket)))]
            pool.append(inst)
            used += len(inst.x) + 2
        pool.sort(key=lambda inst: len(inst.x))
        batches, cur, cur_tokens = [], [], 0
        for inst in pool:
            n = len(inst.x) + 2
            if cur and cur_tokens + n > self.batch_tokens:
                batches.append(cur)
                cur, cur_tokens = [], 0
            cur.append(inst)
            cur_tokens += n
        if cur:
            batches.append(cur)
        order = rng.permutation(len(batches))
        self.queue = [batches[i] for i in order]

    def next(self, rng: np.random.Generator) -> list[TranslationInstance]:
        if not self.queue:
            self._fill(rng)
        return self.queue.pop()

    def state(self) -> list[list[TranslationInstance]]:
        return list(self.queue)


def batch_loss(params: ModelParams, batch: PackedBatch, smoothing: float, train: bool, rng=None) -> T.Tensor:
    """Label-smoothed cross entropy over target slots only.

    Source, register and padding slots never reach the vocabulary projection.
    """
    rows = np.flatnonzero(~batch.ignore.reshape(-1))
    if rows.size == 0:
        raise EmptyLossError("batch has no target tokens")
    logits = forward(params, batch.token_ids, batch.positions, batch.visible, train=train, rng=rng, output_rows=rows)
    targets = batch.targets.reshape(-1)[rows]
    return T.cross_entropy_label_smoothed(logits, targets, smoothing, np.zeros(rows.size, dtype=bool))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-6)
        for k in grads:
            grads[k] = grads[k] * factor
    return total


def train_step(
    params: ModelParams,
    batches: Sequence[PackedBatch],
    config: TrainConfig,
    state: AdamState,
    step: int,
    rng: np.random.Generator,
) -> float:
    """Forward/backward over ``batches`` (accumulated), clip, and apply one Adam update.

    Returns the mean loss over the accumulated batches.
    """
    if not batches:
        raise ConfigurationError("train_step needs at least one batch")
    trainable = params.trainable()
    params.zero_grad()
    losses = []
    for batch in batches:
        loss = batch_loss(params, batch, config.label_smoothing, train=True, rng=rng)
        if not np.isfinite(loss.data):
            raise NonFiniteError(f"non-finite loss at step {step}; batch token ids:\n{batch.token_ids}")
        losses.append(float(loss.data))
        T.backward(loss)
    grads = {k: t.grad / len(batches) for k, t in trainable.items()}
    clip_gradients(grads, config.clip_norm)
    T.adam_step(trainable, grads, state, lr_schedule(step, config.lr_peak, config.warmup_steps))
    return float(np.mean(losses))


def validate(params: ModelParams, langs: LanguageSet, instances: Sequence[TranslationInstance], smoothing: float, batch_size: int = 128) -> float:
    """Token-weighted mean loss with dropout off and no parameter updates."""
    if not instances:
        raise ConfigurationError("validation split is empty")
    variant = params.config.layout_variant
    total, count = 0.0, 0
    with T.no_grad():
        for i in range(0, len(instances), batch_size):
            batch = pack_instances(langs, instances[i : i + batch_size], variant)
            loss = batch_loss(params, batch, smoothing, train=False)
            n = batch.n_target_tokens
            total += float(loss.data) * n
            count += n
    return total / count


def average_params(snapshots: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Arithmetic mean of parameter snapshots."""
    if not snapshots:
        raise ConfigurationError("nothing to average")
    out = {}
    for name in snapshots[0]:
        acc = snapshots[0][name].copy()
        for snap in snapshots[1:]:
            acc = acc + snap[name]
        out[name] = acc / len(snapshots)
    return out


@dataclass
class TrainerState:
    """Everything needed to resume a run bit-for-bit."""

    step: int
    adam: AdamState
    rng: np.random.Generator
    sampler_queue: list[list[TranslationInstance]]
    log: TrainLog
    snapshots: list[dict[str, np.ndarray]]


def snapshot(params: ModelParams) -> dict[str, np.ndarray]:
    source = params.lora.tensors if params.lora is not None else params.tensors
    return {k: t.data.copy() for k, t in source.items()}


def train(
    params: ModelParams,
    corpus: SyntheticCorpus,
    config: TrainConfig,
    state: TrainerState | None = None,
    until_step: int | None = None,
    on_epoch: Callable[[TrainerState], None] | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainerState:
    """Run (or resume) training up to ``until_step`` (default ``config.max_steps``).

    Validation runs every ``valid_interval`` steps (one "epoch"); a parameter
    snapshot is kept for each of the last ``average_last`` epochs.
    """
    variant = params.config.layout_variant
    sampler = BatchSampler(corpus, config.sampling_temperature, config.batch_tokens)
    if state is None:
        state = TrainerState(0, AdamState(), np.random.default_rng(config.seed), [], TrainLog(), [])
    sampler.queue = list(state.sampler_queue)
    end = config.max_steps if until_step is None else until_step
    while state.step < end:
        step = state.step + 1
        batches = [pack_instances(corpus.langs, sampler.next(state.rng), variant) for _ in range(config.accum_steps)]
        loss = train_step(params, batches, config, state.adam, step, state.rng)
        state.log.log_step(step, lr_schedule(step, config.lr_peak, config.warmup_steps), loss)
        state.step = step
        state.sampler_queue = sampler.state()
        if progress is not None:
            progress(step, loss)
        if step % config.valid_interval == 0 or step == config.max_steps:
            epoch = len(state.log.valid) + 1
            state.log.valid.append((epoch, validate(params, corpus.langs, corpus.valid, config.label_smoothing)))
            state.snapshots = (state.snapshots + [snapshot(params)])[-config.average_last :]
            if on_epoch is not None:
                on_epoch(state)
    return state
