"""Training loop, evaluation and grokking detection."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import datasets
from .activations import VARIANTS, batch_variant_loss, loss_op
from .errors import ConfigError, GrokMuonError, NumericFault, NumericInputError
from .model import ModelConfig, ParamSet, forward, init_params, predict
from .optim import Optimizer, make_optimizer
from .tensor import Tape, make_rng

log = logging.getLogger(__name__)

TRAIN_STREAM = 3
OPTIMIZERS = ("adamw", "muon")
METRIC_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class RunConfig:
    task: str = "mod_add"
    optimizer: str = "adamw"
    softmax: str = "softmax"
    seed: int = 0
    modulus: int = datasets.DEFAULT_MODULUS
    train_fraction: Optional[float] = None
    max_epochs: int = 500
    batch_size: int = 512
    patience_after_grok: int = 10
    val_threshold: float = 0.95
    train_threshold: float = 0.99
    train_stability_window: int = 1
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    d_ffn: int = 512
    dropout: float = 0.1
    rope_base: float = 10000.0
    rmsnorm_eps: float = 1e-5
    lr: Optional[float] = None
    weight_decay: Optional[float] = None
    fallback_lr: Optional[float] = None
    grad_clip: Optional[float] = None
    blas_threads: int = 1

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; valid: {', '.join(OPTIMIZERS)}")
        if self.softmax not in VARIANTS:
            raise ConfigError(f"unknown softmax variant {self.softmax!r}; valid: {', '.join(VARIANTS)}")
        if self.max_epochs < 0 or self.batch_size < 1 or self.patience_after_grok < 0:
            raise ConfigError("max_epochs >= 0, batch_size >= 1, patience_after_grok >= 0 required")
        if self.train_stability_window < 1:
            raise ConfigError("train_stability_window must be >= 1")
        self.task_spec()  # validates task/modulus/fraction

    @property
    def run_id(self) -> str:
        return f"{self.task}-{self.optimizer}-{self.softmax}-{self.seed}"

    def task_spec(self) -> datasets.TaskSpec:
        return datasets.TaskSpec(self.task, self.modulus, self.train_fraction)

    def model_config(self) -> ModelConfig:
        spec = self.task_spec()
        return ModelConfig(
            vocab_size=spec.vocab_size, seq_len=spec.seq_len, d_model=self.d_model,
            n_heads=self.n_heads, n_layers=self.n_layers, d_ffn=self.d_ffn,
            dropout_rate=self.dropout, rope_base=self.rope_base,
            rmsnorm_eps=self.rmsnorm_eps, softmax_variant=self.softmax,
        )

    def make_optimizer(self) -> Optimizer:
        return make_optimizer(self.optimizer, self.lr, self.weight_decay, self.fallback_lr)

    @classmethod
    def field_names(cls) -> tuple:
        return tuple(f.name for f in fields(cls))


@dataclass
class RunResult:
    task: str
    optimizer: str
    softmax_variant: str
    seed: int
    history: list = field(default_factory=list)
    grok_epoch: Optional[int] = None
    wall_time_seconds: float = 0.0
    failed: bool = False
    failure: str = ""

    @property
    def grokked(self) -> bool:
        return self.grok_epoch is not None

    @property
    def run_id(self) -> str:
        return f"{self.task}-{self.optimizer}-{self.softmax_variant}-{self.seed}"

    @property
    def epochs_run(self) -> int:
        return len(self.history)

    def final(self, attr: str) -> float:
        return getattr(self.history[-1], attr) if self.history else float("nan")


def _global_clip(params: ParamSet, max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale


def train_epoch(params: ParamSet, config: ModelConfig, x: np.ndarray, y: np.ndarray,
                optimizer: Optimizer, batch_size: int, rng: np.random.Generator,
                grad_clip: Optional[float] = None) -> tuple[float, float]:
    """One pass over shuffled minibatches; returns mean loss and accuracy.

    Raises :class:`NumericFault` as soon as a batch loss is not finite.
    """
    n = len(y)
    if n == 0:
        raise ConfigError("empty training set")
    order = rng.permutation(n)
    total_loss = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        params.zero_grad()
        try:
            with Tape() as tape:
                logits = forward(x[idx], params, config, train_mode=True, rng=rng)
                loss = loss_op(logits, y[idx], config.softmax_variant)
        except NumericInputError as exc:
            raise NumericFault(str(exc)) from exc
        value = loss.item()
        if not np.isfinite(value):
            raise NumericFault(f"non-finite training loss {value}")
        tape.backward(loss)
        if grad_clip:
            _global_clip(params, grad_clip)
        optimizer.step(params)
        total_loss += value * len(idx)
        correct += int(np.sum(predict(logits) == y[idx]))
    return total_loss / n, correct / n


def evaluate(params: ParamSet, config: ModelConfig, x: np.ndarray, y: np.ndarray,
             batch_size: int = 2048) -> tuple[float, float]:
    """Eval-mode loss and argmax accuracy (ties go to the lowest class index)."""
    n = len(y)
    if n == 0:
        raise ConfigError("empty evaluation set")
    total_loss = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        logits = forward(xb, params, config, train_mode=False).data
        loss, _ = batch_variant_loss(logits, yb, config.softmax_variant)
        total_loss += loss * len(yb)
        correct += int(np.sum(predict(logits) == yb))
    return total_loss / n, correct / n


def detect_grok(history: list, val_threshold: float = 0.95, train_threshold: float = 0.99,
                window: int = 1) -> Optional[int]:
    """First epoch with ``val_acc >= val_threshold`` once training accuracy has stabilised.

    Training counts as stabilised at the end of the first run of ``window``
    consecutive epochs with ``train_acc >= train_threshold``.
    """
    streak = 0
    stable = False
    for m in history:
        if not stable:
            streak = streak + 1 if m.train_acc >= train_threshold else 0
            stable = streak >= window
        if stable and m.val_acc >= val_threshold:
            return m.epoch
    return None


def delayed_generalization(history: list, grok_epoch: Optional[int],
                           train_threshold: float = 0.99, val_ceiling: float = 0.5) -> bool:
    """True if some epoch before ``grok_epoch`` had memorised (train high) but not generalised."""
    if grok_epoch is None:
        return False
    return any(m.epoch < grok_epoch and m.train_acc >= train_threshold and m.val_acc < val_ceiling
               for m in history)


def run_experiment(cfg: RunConfig, progress=None) -> RunResult:
    """Generate, split, initialise and train until grokking plus patience or ``max_epochs``."""
    result = RunResult(cfg.task, cfg.optimizer, cfg.softmax, cfg.seed)
    t0 = time.perf_counter()
    spec = cfg.task_spec()
    mcfg = cfg.model_config()
    x, y = datasets.to_arrays(datasets.generate(spec))
    train_idx, val_idx = datasets.split_indices(len(y), spec.train_fraction, cfg.seed)
    xt, yt, xv, yv = x[train_idx], y[train_idx], x[val_idx], y[val_idx]
    params = init_params(mcfg, cfg.seed)
    opt = cfg.make_optimizer()
    rng = make_rng(cfg.seed, TRAIN_STREAM)

    with threadpool_limits(limits=cfg.blas_threads):
        for epoch in range(1, cfg.max_epochs + 1):
            try:
                tr_loss, tr_acc = train_epoch(params, mcfg, xt, yt, opt, cfg.batch_size, rng, cfg.grad_clip)
                va_loss, va_acc = evaluate(params, mcfg, xv, yv)
            except GrokMuonError as exc:
                result.failed = True
                result.failure = f"epoch {epoch}: {exc}"
                log.warning("%s aborted: %s", cfg.run_id, result.failure)
                break
            result.history.append(EpochMetrics(epoch, tr_loss, tr_acc, va_loss, va_acc))
            if progress is not None:
                progress(result.history[-1])
            if result.grok_epoch is None:
                result.grok_epoch = detect_grok(result.history, cfg.val_threshold,
                                                cfg.train_threshold, cfg.train_stability_window)
            if result.grok_epoch is not None and epoch >= result.grok_epoch + cfg.patience_after_grok:
                break
    result.wall_time_seconds = time.perf_counter() - t0
    return result


def write_metrics_csv(result: RunResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for m in result.history:
            w.writerow([m.epoch] + [f"{getattr(m, k):.6g}" for k in METRIC_FIELDS[1:]])


def read_metrics_csv(path) -> list[EpochMetrics]:
    with open(path, newline="") as fh:
        return [EpochMetrics(int(r["epoch"]), *(float(r[k]) for k in METRIC_FIELDS[1:]))
                for r in csv.DictReader(fh)]


def result_to_dict(result: RunResult) -> dict:
    d = asdict(result)
    d["grokked"] = result.grokked
    return d
