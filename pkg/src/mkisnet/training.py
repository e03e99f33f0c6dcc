"""Class weighting, Adam, and the training loop with checkpoint/resume."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import queue
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import modelfile
from .errors import ConfigError, DataError, MissingClassError, ModelFileError, NonFiniteError
from .model import Model, model_from_container, save_model
from .tensor import Tape, Tensor, softmax_cross_entropy, use_tape

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassWeights:
    w: tuple

    def __post_init__(self):
        w = tuple(float(x) for x in self.w)
        if len(w) != 2 or not all(math.isfinite(x) and x > 0 for x in w):
            raise ConfigError(f"class weights must be two positive finite numbers, got {self.w}")
        object.__setattr__(self, "w", w)

    def __iter__(self):
        return iter(self.w)

    def __getitem__(self, i):
        return self.w[i]


def class_frequencies(samples):
    """Per-class pixel frequency over the images in which each class appears.

    Returns ``(freq, pixel_counts, image_pixel_totals)``; only in-mask pixels count.
    """
    pixels = np.zeros(2, dtype=np.int64)
    totals = np.zeros(2, dtype=np.int64)
    n = 0
    for s in samples:
        n += 1
        counted = s.counted()
        lab = s.label[counted]
        size = lab.size
        per_class = np.array([size - int(lab.sum()), int(lab.sum())], dtype=np.int64)
        pixels += per_class
        totals += np.where(per_class > 0, size, 0)
    if n == 0:
        raise DataError("cannot compute class weights of an empty dataset")
    missing = [c for c in range(2) if pixels[c] == 0]
    if missing:
        raise MissingClassError(f"class(es) {missing} absent from the whole dataset")
    return pixels / totals, pixels, totals


def median_frequency_weights(samples) -> ClassWeights:
    freq, _, _ = class_frequencies(samples)
    med = float(np.median(freq))
    return ClassWeights(tuple(med / f for f in freq))


# Adam ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    t: int = 0

    @classmethod
    def for_parameters(cls, params):
        return cls(
            OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items()),
            OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items()),
        )


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update of ``params`` (name -> Tensor) given ``grads`` (name -> array).

    Missing gradients count as zero. Raises NonFiniteError (with the parameter
    name and step index) before touching anything if a gradient is not finite.
    """
    step = state.t + 1
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r} at step {step}", name=name, step=step)
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
    state.t = step
    return params, state


# configuration --------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    epochs: int = 10
    batch_size: int = 4
    rng_seed: int = 0
    checkpoint_interval: int = 0  # steps; 0 disables periodic checkpoints
    deterministic: bool = True
    lr_decay: Optional[float] = None  # per-epoch multiplicative decay, off by default
    max_steps: Optional[int] = None  # caps the run in optimizer steps instead of epochs
    prefetch: int = 2

    def validate(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.adam_epsilon <= 0:
            raise ConfigError("adam_epsilon must be > 0")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")
        if self.lr_decay is not None and not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.prefetch < 0:
            raise ConfigError("prefetch must be >= 0")
        return self


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    """Learning rate for ``epoch``; constant unless ``lr_decay`` is set."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    decay = 1.0 if config.lr_decay is None else config.lr_decay
    return config.learning_rate * decay ** epoch


# logging ----------------------------------------------------------------------------

@dataclass
class LogRecord:
    epoch: int
    step: int
    loss: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    HEADER = ("epoch", "step", "loss", "lr", "seconds")

    @property
    def losses(self):
        return [r.loss for r in self.records]

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(self.HEADER)
            for r in self.records:
                w.writerow([r.epoch, r.step, repr(r.loss), repr(r.lr), f"{r.seconds:.3f}"])

    @classmethod
    def read_csv(cls, path):
        log = cls()
        with open(path, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                log.records.append(LogRecord(int(row["epoch"]), int(row["step"]), float(row["loss"]),
                                             float(row["lr"]), float(row["seconds"])))
        return log


# batching ---------------------------------------------------------------------------

def _to_batch(samples, dtype):
    shapes = {s.shape for s in samples}
    if len(shapes) != 1:
        raise DataError(f"samples in one batch must share a size, got {sorted(shapes)}")
    x = np.stack([np.transpose(s.image, (2, 0, 1)) for s in samples]).astype(dtype)
    y = np.stack([s.label for s in samples])
    m = np.stack([s.counted() for s in samples])
    return x, y, m


def _prefetch(iterator, depth):
    """Yield from ``iterator`` through a bounded queue filled by a worker thread."""
    if depth <= 0:
        yield from iterator
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def worker():
        try:
            for item in iterator:
                if stop.is_set():
                    return
                q.put(item)
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)
        q.put(done)

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while t.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                t.join(timeout=0.01)


def epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(n)


def dropout_seed(seed, step):
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


# checkpoints ------------------------------------------------------------------------

@dataclass
class TrainPosition:
    epoch: int = 0
    step_in_epoch: int = 0
    global_step: int = 0


def save_checkpoint(path, model: Model, state: AdamState, position: TrainPosition, config: TrainConfig):
    extra = OrderedDict()
    for k in state.m:
        extra["adam.m/" + k] = state.m[k]
        extra["adam.v/" + k] = state.v[k]
    meta = {"adam_t": state.t, "position": dataclasses.asdict(position), "train_config": dataclasses.asdict(config)}
    tmp = Path(str(path) + ".tmp")
    save_model(model, tmp, section=(meta, extra))
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(model, adam_state, position, train_config)``."""
    cfg_block, tensors, section = modelfile.load(path)
    if section is None:
        raise ModelFileError(f"{path} has no optimizer-state section")
    meta, extra = section
    model = model_from_container(cfg_block, tensors)
    state = AdamState(t=int(meta["adam_t"]))
    for name in model.parameters:
        state.m[name] = extra["adam.m/" + name]
        state.v[name] = extra["adam.v/" + name]
    return model, state, TrainPosition(**meta["position"]), TrainConfig(**meta["train_config"])


# loop -------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    log: TrainLog
    state: AdamState
    position: TrainPosition


def train(model: Model, train_set, config: TrainConfig, weights: ClassWeights, out_dir=None,
          state: Optional[AdamState] = None, position: Optional[TrainPosition] = None,
          log: Optional[TrainLog] = None, on_step=None) -> TrainResult:
    """Train ``model`` in place with weighted cross-entropy and Adam.

    ``state``/``position`` resume an interrupted run. Each epoch visits
    ``train_set`` in a permutation seeded by (rng_seed, epoch); the dropout
    mask of step k is seeded by (rng_seed, k), so resumed runs replay exactly.
    On a non-finite loss the NonFiniteError propagates and the last checkpoint
    on disk is left untouched.
    """
    config.validate()
    n = len(train_set)
    if n == 0:
        raise DataError("empty training set")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    model.set_trainable(True)
    state = state if state is not None else AdamState.for_parameters(model.parameters)
    pos = position if position is not None else TrainPosition()
    log = log if log is not None else TrainLog()
    steps_per_epoch = math.ceil(n / config.batch_size)
    w = tuple(weights)
    t0 = time.perf_counter()
    depth = 1 if config.deterministic else config.prefetch

    def batches(epoch, start):
        order = epoch_order(n, config.rng_seed, epoch)
        for k in range(start, steps_per_epoch):
            idx = order[k * config.batch_size:(k + 1) * config.batch_size]
            yield k, _to_batch([train_set[int(i)] for i in idx], model.dtype)

    done = False
    while pos.epoch < config.epochs and not done:
        lr = lr_schedule(config, pos.epoch)
        for k, (x, y, m) in _prefetch(batches(pos.epoch, pos.step_in_epoch), depth):
            if config.max_steps is not None and pos.global_step >= config.max_steps:
                done = True
                break
            model.zero_grad()
            tape = Tape()
            # overflow surfaces as NonFiniteError from the explicit checks, not as warnings
            with use_tape(tape), np.errstate(over="ignore", invalid="ignore"):
                logits = model.forward_logits(Tensor(x, dtype=model.dtype), mode="train",
                                              rng_seed=dropout_seed(config.rng_seed, pos.global_step))
                loss = softmax_cross_entropy(logits, y, w, m)
                loss_value = float(loss.data)
                if not math.isfinite(loss_value):
                    raise NonFiniteError(f"non-finite loss at step {pos.global_step}", step=pos.global_step)
                loss.backward()
            grads = {name: p.grad for name, p in model.parameters.items()}
            adam_step(model.parameters, grads, state, lr, config.beta1, config.beta2, config.adam_epsilon)
            pos.global_step += 1
            pos.step_in_epoch = k + 1
            log.records.append(LogRecord(pos.epoch, pos.global_step, loss_value, lr, time.perf_counter() - t0))
            if out_dir is not None and config.checkpoint_interval and pos.global_step % config.checkpoint_interval == 0:
                ckpt_pos = _normalized(pos, steps_per_epoch)
                save_checkpoint(out_dir / "checkpoint_last.mkis", model, state, ckpt_pos, config)
            if on_step is not None:
                on_step(log.records[-1])
        else:
            pos.epoch += 1
            pos.step_in_epoch = 0
        if config.max_steps is not None and pos.global_step >= config.max_steps:
            done = True
    model.zero_grad()
    pos = _normalized(pos, steps_per_epoch)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint_last.mkis", model, state, pos, config)
        save_model(model, out_dir / "model.mkis")
        log.write_csv(out_dir / "train_log.csv")
    return TrainResult(model, log, state, pos)


def _normalized(pos, steps_per_epoch):
    if pos.step_in_epoch >= steps_per_epoch:
        return TrainPosition(pos.epoch + 1, 0, pos.global_step)
    return TrainPosition(pos.epoch, pos.step_in_epoch, pos.global_step)


def resume(checkpoint_path, train_set, weights: ClassWeights, config: Optional[TrainConfig] = None,
           out_dir=None, log=None) -> TrainResult:
    """Continue training from a checkpoint written by :func:`train`."""
    model, state, pos, saved_cfg = load_checkpoint(checkpoint_path)
    return train(model, train_set, config or saved_cfg, weights, out_dir=out_dir, state=state,
                 position=pos, log=log)
