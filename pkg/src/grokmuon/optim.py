"""AdamW and Muon behind a common ``step(params, grads, state)`` interface.

Both optimizers decay the pre-update parameter value by ``lr * weight_decay``
so that equal decay settings mean the same thing for either one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, ContractError

QUINTIC_COEFFS = (3.4445, -4.7750, 2.0315)
CUBIC_COEFFS = (1.5, -0.5, 0.0)


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.lr <= 0 or self.eps < 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0; eps and weight_decay must be >= 0")


@dataclass(frozen=True)
class MuonConfig:
    lr: float = 0.01
    momentum: float = 0.95
    ns_iterations: int = 5
    ns_coefficients: tuple = QUINTIC_COEFFS
    ns_polish_iterations: int = 1
    weight_decay: float = 0.1
    nesterov: bool = True
    fallback: AdamWConfig = field(default_factory=AdamWConfig)

    def __post_init__(self):
        if self.ns_iterations < 1:
            raise ConfigError("ns_iterations must be >= 1")
        if self.ns_polish_iterations < 0:
            raise ConfigError("ns_polish_iterations must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0 and weight_decay >= 0")
        if len(self.ns_coefficients) != 3:
            raise ConfigError("ns_coefficients must be an (a, b, c) triple")


@dataclass
class OptimizerState:
    step: int = 0
    buffers: dict = field(default_factory=dict)  # name -> {"m", "v", "momentum", "step"}


def _check_shapes(params: Mapping, grads: Mapping) -> None:
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if np.shape(g) != p.data.shape:
            raise ContractError(f"gradient for {name} has shape {np.shape(g)}, parameter {p.data.shape}")


def _adamw_update(p, g, buf: dict, cfg: AdamWConfig) -> None:
    if "m" not in buf:
        buf["m"] = np.zeros_like(p.data)
        buf["v"] = np.zeros_like(p.data)
        buf["step"] = 0
    buf["step"] += 1
    t = buf["step"]
    buf["m"] = cfg.beta1 * buf["m"] + (1.0 - cfg.beta1) * g
    buf["v"] = cfg.beta2 * buf["v"] + (1.0 - cfg.beta2) * g * g
    m_hat = buf["m"] / (1.0 - cfg.beta1 ** t)
    v_hat = buf["v"] / (1.0 - cfg.beta2 ** t)
    denom = np.sqrt(v_hat) + cfg.eps
    # 0/0 (zero gradient with eps=0) contributes no movement
    with np.errstate(invalid="ignore", divide="ignore"):
        direction = np.where(denom > 0, m_hat / np.where(denom > 0, denom, 1.0), 0.0)
    p.data = p.data - cfg.lr * direction - cfg.lr * cfg.weight_decay * p.data


def adamw_step(params: Mapping, grads: Mapping, state: OptimizerState, config: AdamWConfig) -> OptimizerState:
    _check_shapes(params, grads)
    state.step += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        _adamw_update(p, np.asarray(g, dtype=np.float64), state.buffers.setdefault(name, {}), config)
    return state


def newton_schulz_orthogonalize(m, config: MuonConfig | None = None, *, iterations: int | None = None,
                                coefficients=None, polish_iterations: int | None = None) -> np.ndarray:
    """Push all singular values of ``m`` toward 1, keeping its singular vectors.

    Runs ``X <- a X + b (X X^T) X + c (X X^T)^2 X`` from ``X = m / ||m||_F``,
    then ``polish_iterations`` cubic steps ``1.5 X - 0.5 (X X^T) X``.  The quintic
    grows small singular values quickly but settles into an oscillation between
    about 0.68 and 1.13; the cubic steps pull that band in toward 1.

    Wide orientation is used internally so ``X X^T`` is the smaller Gram matrix.
    An all-zero input returns zeros.
    """
    if config is not None:
        iterations = config.ns_iterations if iterations is None else iterations
        coefficients = config.ns_coefficients if coefficients is None else coefficients
        polish_iterations = config.ns_polish_iterations if polish_iterations is None else polish_iterations
    iterations = 5 if iterations is None else iterations
    polish_iterations = 1 if polish_iterations is None else polish_iterations
    a, b, c = QUINTIC_COEFFS if coefficients is None else coefficients
    x = np.asarray(m, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"Newton-Schulz needs a matrix, got shape {x.shape}")
    norm = np.linalg.norm(x)
    if norm == 0.0:
        return np.zeros_like(x)
    tall = x.shape[0] > x.shape[1]
    if tall:
        x = x.T
    x = x / norm
    for _ in range(iterations):
        gram = x @ x.T
        x = a * x + (b * gram + c * gram @ gram) @ x
    for _ in range(polish_iterations):
        x = 1.5 * x - 0.5 * (x @ x.T) @ x
    return x.T if tall else x


def shape_scale(rows: int, cols: int) -> float:
    if rows < 1 or cols < 1:
        raise ConfigError("matrix dimensions must be positive")
    return float(np.sqrt(max(1.0, rows / cols)))


def uses_muon(name: str, shape: tuple) -> bool:
    """Muon handles 2-D weight matrices; the embedding table and gains fall back to AdamW."""
    return len(shape) == 2 and name != "embedding"


def muon_step(params: Mapping, grads: Mapping, state: OptimizerState, config: MuonConfig) -> OptimizerState:
    _check_shapes(params, grads)
    state.step += 1
    mu = config.momentum
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        buf = state.buffers.setdefault(name, {})
        if not uses_muon(name, p.data.shape):
            _adamw_update(p, g, buf, config.fallback)
            continue
        if "momentum" not in buf:
            buf["momentum"] = np.zeros_like(p.data)
        buf["momentum"] = mu * buf["momentum"] + g
        eff = g + mu * buf["momentum"] if config.nesterov else buf["momentum"]
        ortho = newton_schulz_orthogonalize(eff, config)
        rows, cols = p.data.shape
        p.data = (p.data - config.lr * shape_scale(rows, cols) * ortho
                  - config.lr * config.weight_decay * p.data)
    return state


class Optimizer:
    """Binds a config to its step function and owns the state."""

    def __init__(self, config: AdamWConfig | MuonConfig):
        self.config = config
        self.state = OptimizerState()
        self._step = muon_step if isinstance(config, MuonConfig) else adamw_step

    @property
    def name(self) -> str:
        return "muon" if isinstance(self.config, MuonConfig) else "adamw"

    def step(self, params: Mapping) -> None:
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        self._step(params, grads, self.state, self.config)


def make_optimizer(name: str, lr: float | None = None, weight_decay: float | None = None,
                   fallback_lr: float | None = None) -> Optimizer:
    """Defaults for ``"adamw"`` or ``"muon"``, with optional overrides."""
    name = name.lower()
    if name == "adamw":
        kw = {}
        if lr is not None:
            kw["lr"] = lr
        if weight_decay is not None:
            kw["weight_decay"] = weight_decay
        return Optimizer(AdamWConfig(**kw))
    if name == "muon":
        fb = {}
        if fallback_lr is not None:
            fb["lr"] = fallback_lr
        if weight_decay is not None:
            fb["weight_decay"] = weight_decay
        kw = {"fallback": AdamWConfig(**fb)}
        if lr is not None:
            kw["lr"] = lr
        if weight_decay is not None:
            kw["weight_decay"] = weight_decay
        return Optimizer(MuonConfig(**kw))
    raise ConfigError(f"unknown optimizer {name!r}; expected 'adamw' or 'muon'")
