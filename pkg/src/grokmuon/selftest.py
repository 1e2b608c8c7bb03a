"""Built-in checks for an installed copy: gradients and closed-form oracles.

Each check prints one ``PASS``/``FAIL`` line.  Nothing here needs the test
dependencies, so ``grokmuon selftest`` works on a bare install.
"""
from __future__ import annotations

import math
import time

import numpy as np

from . import datasets
from . import tensor as T
from .activations import VARIANTS, loss_op, sparsemax
from .model import ModelConfig, ParamSet, forward, init_params
from .optim import newton_schulz_orthogonalize
from .stats import t_survival, welch_t_test


def _op_gradients():
    rng = np.random.default_rng(0)
    a = T.Tensor(rng.normal(size=(3, 4)))
    b = rng.normal(size=(4, 2))
    w = rng.normal(size=(3, 4))
    cases = {
        "matmul": lambda x: T.sum_(T.mul(T.matmul(x, T.Tensor(b)), T.matmul(x, T.Tensor(b)))),
        "silu": lambda x: T.sum_(T.mul(T.silu(x), T.Tensor(w))),
        "softmax": lambda x: T.sum_(T.mul(T.softmax(x), T.Tensor(w))),
        "rmsnorm": lambda x: T.sum_(T.mul(T.rmsnorm(x, T.Tensor(np.ones(4)), 1e-5), T.Tensor(w))),
        "exp/log": lambda x: T.sum_(T.log(T.add(T.exp(x), T.Tensor(1.0)))),
        "rope": lambda x: T.sum_(T.mul(T.rope(T.reshape(x, (3, 1, 4))), T.Tensor(w.reshape(3, 1, 4)))),
    }
    worst = {k: T.grad_check(f, a) for k, f in cases.items()}
    name = max(worst, key=worst.get)
    return worst[name] < 1e-6, f"max relative error {worst[name]:.2e} ({name})"


def _loss_gradients():
    rng = np.random.default_rng(1)
    z = T.Tensor(rng.normal(size=(4, 6)) * 2)
    targets = np.array([0, 3, 5, 1])
    worst = max(T.grad_check(lambda x, v=v: loss_op(x, targets, v), z) for v in VARIANTS)
    return worst < 1e-5, f"max relative error {worst:.2e}"


def _model_gradient():
    cfg = ModelConfig(vocab_size=5, seq_len=4, d_model=8, n_heads=2, n_layers=1, d_ffn=16, dropout_rate=0.0)
    params = init_params(cfg, 0)
    for t in params.values():
        if t.ndim == 2:
            t.data = t.data * 15.0  # lift tiny init-scale gradients above difference noise
    tokens = np.random.default_rng(2).integers(0, 5, size=(4, 4))
    targets = np.array([0, 3, 1, 4])
    worst = 0.0
    for name in params:
        def f(t, name=name):
            swapped = ParamSet(params)
            swapped[name] = t
            return loss_op(forward(tokens, swapped, cfg), targets)
        worst = max(worst, T.grad_check(f, params[name]))
    return worst < 1e-3, f"max relative error {worst:.2e} over {len(params)} parameters"


def _sparsemax_projection():
    rng = np.random.default_rng(3)
    worst_p, worst_tau = 0.0, 0.0
    for _ in range(200):
        z = rng.normal(size=rng.integers(2, 201)) * rng.uniform(0.1, 10)
        res = sparsemax(z)
        lo, hi = z.min() - 1.0, z.max()
        for _ in range(200):  # bisection on sum(max(z - tau, 0)) = 1
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if np.maximum(z - mid, 0).sum() > 1 else (lo, mid)
        ref = np.maximum(z - 0.5 * (lo + hi), 0)
        worst_p = max(worst_p, float(np.abs(res.probs - ref).max()))
        worst_tau = max(worst_tau, abs(float(np.maximum(z - res.tau, 0).sum()) - 1.0))
    return worst_p < 1e-6 and worst_tau < 1e-9, f"max |p - ref| {worst_p:.1e}, max |sum - 1| {worst_tau:.1e}"


def _newton_schulz_band():
    rng = np.random.default_rng(4)
    lo, hi, dist = np.inf, 0.0, 0.0
    done = 0
    while done < 30:
        m = rng.normal(size=tuple(rng.integers(2, 65, size=2)))
        s = np.linalg.svd(m, compute_uv=False)
        if s[0] / s[-1] > 100:
            continue
        done += 1
        out = newton_schulz_orthogonalize(m)
        sv = np.linalg.svd(out, compute_uv=False)
        u, _, vt = np.linalg.svd(m, full_matrices=False)
        lo, hi = min(lo, sv.min()), max(hi, sv.max())
        dist = max(dist, float(np.linalg.norm(out - u @ vt, 2)))
    return lo >= 0.7 and hi <= 1.3 and dist <= 0.35, f"singular values in [{lo:.3f}, {hi:.3f}], distance {dist:.3f}"


def _t_test():
    r = welch_t_test([1, 2, 3], [2, 3, 4])
    cauchy = t_survival(1.0, 1)
    ok = (abs(r.t_statistic + math.sqrt(1.5)) < 1e-12 and abs(r.degrees_of_freedom - 4) < 1e-12
          and abs(cauchy - 0.25) < 1e-12 and abs(t_survival(2.776, 4) - 0.025) < 1e-3)
    return ok, f"t={r.t_statistic:.5f} df={r.degrees_of_freedom:g} p={r.p_value:.4f}"


def _datasets():
    counts = {k: len(datasets.generate(datasets.TaskSpec(k))) for k in datasets.TASKS}
    want = {"gcd": 9409, "mod_add": 9409, "mod_div": 9312, "mod_exp": 9409, "mod_mul": 9409, "parity": 1024}
    div_ok = all((e.answer * e.operands[1]) % 97 == e.operands[0]
                 for e in datasets.generate(datasets.TaskSpec("mod_div")))
    return counts == want and div_ok, ", ".join(f"{k}={v}" for k, v in counts.items())


CHECKS = [
    ("tensor op gradients", _op_gradients, False),
    ("loss gradients", _loss_gradients, False),
    ("transformer gradient", _model_gradient, True),
    ("sparsemax projection", _sparsemax_projection, False),
    ("newton-schulz band", _newton_schulz_band, False),
    ("t-test", _t_test, False),
    ("datasets", _datasets, True),
]


def run_all(quick: bool = False) -> bool:
    ok_all = True
    for name, fn, slow in CHECKS:
        if quick and slow:
            print(f"SKIP {name}")
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not a crashed selftest
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.perf_counter() - t0:.1f}s)", flush=True)
    return ok_all
