"""Exhaustive generators for the algorithmic tasks, splitting and encoding."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .tensor import make_rng

TASKS = ("gcd", "mod_add", "mod_div", "mod_exp", "mod_mul", "parity")

TRAIN_FRACTIONS = {
    "gcd": 0.5,
    "mod_add": 0.8,
    "mod_div": 0.8,
    "mod_exp": 0.7,
    "mod_mul": 0.5,
    "parity": 0.5,
}

PARITY_BITS = 10
DEFAULT_MODULUS = 97
SPLIT_STREAM = 2


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    return all(n % d for d in range(2, math.isqrt(n) + 1))


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    modulus: int = DEFAULT_MODULUS
    train_fraction: Optional[float] = None

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ConfigError(f"unknown task {self.kind!r}; valid tasks: {', '.join(TASKS)}")
        if self.train_fraction is None:
            object.__setattr__(self, "train_fraction", TRAIN_FRACTIONS[self.kind])
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.kind != "parity":
            if self.modulus < 2:
                raise ConfigError(f"modulus must be >= 2, got {self.modulus}")
            if self.kind in ("mod_div", "mod_exp") and not is_prime(self.modulus):
                raise ConfigError(f"{self.kind} needs a prime modulus, got {self.modulus}")

    @property
    def vocab_size(self) -> int:
        return 3 if self.kind == "parity" else self.modulus + 2

    @property
    def seq_len(self) -> int:
        return PARITY_BITS + 1 if self.kind == "parity" else 4

    @property
    def num_classes(self) -> int:
        return 2 if self.kind == "parity" else self.modulus


@dataclass(frozen=True)
class Example:
    """One task row: operands (``a, b`` or the parity bits) and the answer."""
    operands: tuple
    answer: int
    input_tokens: tuple = field(default=())


def mod_inverse(b: int, p: int) -> int:
    """Inverse of ``b`` modulo ``p`` by the extended Euclidean algorithm."""
    old_r, r = b % p, p
    old_s, s = 1, 0
    while r:
        q = old_r // r
        old_r, r = r, old_r - q * r
        old_s, s = s, old_s - q * s
    if old_r != 1:
        raise ValueError(f"{b} has no inverse modulo {p}")
    return old_s % p


def _answer(kind: str, a: int, b: int, p: int) -> int:
    if kind == "mod_add":
        return (a + b) % p
    if kind == "mod_mul":
        return (a * b) % p
    if kind == "mod_div":
        return (a * mod_inverse(b, p)) % p
    if kind == "mod_exp":
        return pow(a, b, p)  # pow(0, 0, p) == 1
    if kind == "gcd":
        return math.gcd(a, b)
    raise ConfigError(f"unsupported task {kind!r}")


def encode(example: Example, task: TaskSpec) -> tuple:
    """Token sequence: ``[a, OP, b, EQ]`` for modular tasks, ``[bits..., EQ]`` for parity."""
    if task.kind == "parity":
        return tuple(example.operands) + (2,)
    a, b = example.operands
    p = task.modulus
    return (a, p, b, p + 1)


def generate(task: TaskSpec) -> list[Example]:
    """All rows of ``task`` in lexicographic operand order."""
    rows = []
    if task.kind == "parity":
        for n in range(2 ** PARITY_BITS):
            bits = tuple((n >> (PARITY_BITS - 1 - i)) & 1 for i in range(PARITY_BITS))
            rows.append(Example(bits, sum(bits) % 2))
    else:
        p = task.modulus
        b_start = 1 if task.kind == "mod_div" else 0
        for a in range(p):
            for b in range(b_start, p):
                rows.append(Example((a, b), _answer(task.kind, a, b, p)))
    return [Example(r.operands, r.answer, encode(r, task)) for r in rows]


def to_arrays(examples: list[Example]) -> tuple[np.ndarray, np.ndarray]:
    """Stack examples into ``(tokens [n, seq], answers [n])`` integer arrays."""
    x = np.array([e.input_tokens for e in examples], dtype=np.int64)
    y = np.array([e.answer for e in examples], dtype=np.int64)
    return x, y


def split_indices(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = make_rng(seed, SPLIT_STREAM).permutation(n)
    n_train = int(math.floor(n * train_fraction))
    return perm[:n_train], perm[n_train:]


def split(examples: list, train_fraction: float, seed: int) -> tuple[list, list]:
    train_idx, val_idx = split_indices(len(examples), train_fraction, seed)
    return [examples[i] for i in train_idx], [examples[i] for i in val_idx]


def dump_csv(task: TaskSpec, path) -> None:
    """Write the full task table for inspection."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if task.kind == "parity":
            w.writerow(["bits", "answer"])
            for e in generate(task):
                w.writerow(["".join(map(str, e.operands)), e.answer])
        else:
            w.writerow(["a", "b", "op", "answer"])
            for e in generate(task):
                w.writerow([e.operands[0], e.operands[1], task.kind, e.answer])
