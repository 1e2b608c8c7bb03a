import numpy as np
import pytest

from grokmuon import datasets
from grokmuon import tensor as T
from grokmuon.activations import loss_op
from grokmuon.errors import ConfigError
from grokmuon.model import (ModelConfig, ParamSet, attention_block, forward, init_params,
                            load_checkpoint, predict, rmsnorm, rope_rotate, save_checkpoint)
from grokmuon.tensor import Tensor, grad_check


def tiny(**kw):
    base = dict(vocab_size=5, seq_len=4, d_model=8, n_heads=2, n_layers=1, d_ffn=16, dropout_rate=0.0)
    base.update(kw)
    return ModelConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=5, d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=5, d_model=6, n_heads=2)  # head_dim 3 is odd
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=5, softmax_variant="entmax")


def test_init_is_deterministic_and_gains_are_one():
    cfg = tiny()
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    assert list(a) == list(b)
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes()
        assert a[k].requires_grad
    assert all(np.all(a[k].data == 1.0) for k in a if k.endswith("gain"))
    c = init_params(cfg, 4)
    assert not np.array_equal(a["W_out"].data, c["W_out"].data)


def test_param_shapes():
    cfg = tiny(n_layers=2)
    p = init_params(cfg, 0)
    assert p["embedding"].shape == (5, 8)
    assert p["layers.1.attn.W_q"].shape == (8, 8)
    assert p["layers.0.ffn.W_1"].shape == (8, 16)
    assert p["layers.0.ffn.W_2"].shape == (16, 8)
    assert p["final_norm.gain"].shape == (8,)
    assert p["W_out"].shape == (8, 5)


def test_weight_variance_matches_init_std():
    p = init_params(ModelConfig(vocab_size=10, d_model=128, d_ffn=512), 0)
    var = p["layers.0.attn.W_q"].data.var()
    assert 0.8 * 0.02 ** 2 <= var <= 1.2 * 0.02 ** 2
    # truncation at two underlying standard deviations
    sigma = 0.02 / np.sqrt(0.7737413035499232)
    assert np.abs(p["layers.0.ffn.W_1"].data).max() <= 2 * sigma


def test_rmsnorm_examples(np_rng):
    out = rmsnorm(Tensor(np.ones((2, 4))), Tensor(np.ones(4)), 0.0).data
    np.testing.assert_allclose(out, 1.0)
    out = rmsnorm(Tensor([[3.0, 4.0]]), Tensor(np.ones(2)), 0.0).data
    np.testing.assert_allclose(out, [[0.848528137423857, 1.131370849898476]], rtol=1e-12)
    x = np_rng.normal(size=(6, 16))
    out = rmsnorm(Tensor(x), Tensor(np.ones(16)), 0.0).data
    np.testing.assert_allclose(np.sqrt((out ** 2).mean(axis=-1)), 1.0, atol=1e-9)


def test_rope_position_zero_identity_and_norm(np_rng):
    x = np_rng.normal(size=(5, 2, 8))
    out = rope_rotate(Tensor(x)).data
    np.testing.assert_array_equal(out[0], x[0])
    pairs_in = np.hypot(x[..., 0::2], x[..., 1::2])
    pairs_out = np.hypot(out[..., 0::2], out[..., 1::2])
    np.testing.assert_allclose(pairs_in, pairs_out, atol=1e-9)


def test_rope_relative_angle(np_rng):
    q, k = np_rng.normal(size=2), np_rng.normal(size=2)
    seq = 12

    def at(vec, pos):
        x = np.zeros((seq, 1, 2))
        x[pos, 0] = vec
        return rope_rotate(Tensor(x)).data[pos, 0]

    for diff in (0, 1, 3):
        dots = [at(q, p + diff) @ at(k, p) for p in range(seq - diff)]
        np.testing.assert_allclose(dots, dots[0], atol=1e-12)


def test_rope_odd_head_dim_rejected():
    with pytest.raises(ConfigError):
        rope_rotate(Tensor(np.ones((2, 1, 3))))


def test_attention_single_position_and_row_sums(np_rng):
    cfg = tiny()
    p = init_params(cfg, 0)
    x = Tensor(np_rng.normal(size=(1, 1, 8)))
    _, w = attention_block(x, p, cfg, 0, return_weights=True)
    np.testing.assert_allclose(w, np.ones((1, 2, 1, 1)))
    x = Tensor(np_rng.normal(size=(3, 4, 8)))
    _, w = attention_block(x, p, cfg, 0, return_weights=True)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(w[..., np.triu_indices(4, 1)[0], np.triu_indices(4, 1)[1]] == 0.0)


def test_attention_matches_brute_force_two_tokens(np_rng):
    cfg = tiny(n_heads=1, d_model=4, d_ffn=4)
    p = init_params(cfg, 1)
    for name in ("W_q", "W_k", "W_v", "W_o"):
        p[f"layers.0.attn.{name}"].data = np_rng.normal(size=(4, 4))
    x = np_rng.normal(size=(1, 2, 4))
    y, w = attention_block(Tensor(x), p, cfg, 0, return_weights=True)

    # explicit loop: normalise, project, rotate position 1 by base**0 and base**(-1/2)
    xn = x[0] / np.sqrt((x[0] ** 2).mean(axis=-1, keepdims=True) + cfg.rmsnorm_eps)
    q, k, v = (xn @ p[f"layers.0.attn.{n}"].data for n in ("W_q", "W_k", "W_v"))

    def rot(vec, pos):
        out = vec.copy()
        for i in range(2):
            ang = pos * 10000.0 ** (-2 * i / 4)
            c, s = np.cos(ang), np.sin(ang)
            out[2 * i], out[2 * i + 1] = vec[2 * i] * c - vec[2 * i + 1] * s, vec[2 * i] * s + vec[2 * i + 1] * c
        return out

    q = np.array([rot(q[i], i) for i in range(2)])
    k = np.array([rot(k[i], i) for i in range(2)])
    s10, s11 = q[1] @ k[0] / 2.0, q[1] @ k[1] / 2.0
    a = np.exp([s10, s11]) / np.exp([s10, s11]).sum()
    np.testing.assert_allclose(w[0, 0], [[1.0, 0.0], a], atol=1e-12)
    ctx = np.array([v[0], a[0] * v[0] + a[1] * v[1]])
    np.testing.assert_allclose(y.data[0], x[0] + ctx @ p["layers.0.attn.W_o"].data, atol=1e-12)


def test_forward_shapes_and_eval_determinism(np_rng):
    cfg = tiny(dropout_rate=0.3)
    p = init_params(cfg, 0)
    tokens = np_rng.integers(0, 5, size=(6, 4))
    a = forward(tokens, p, cfg).data
    b = forward(tokens, p, cfg).data
    assert a.shape == (6, 5)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(IndexError):
        forward(np.array([[0, 1, 2, 5]]), p, cfg)


def test_dropout_zero_train_equals_eval(np_rng):
    cfg = tiny()
    p = init_params(cfg, 0)
    tokens = np_rng.integers(0, 5, size=(3, 4))
    train = forward(tokens, p, cfg, train_mode=True, rng=T.make_rng(0)).data
    np.testing.assert_array_equal(train, forward(tokens, p, cfg).data)


def test_dropout_changes_train_outputs(np_rng):
    cfg = tiny(dropout_rate=0.5)
    p = init_params(cfg, 0)
    tokens = np_rng.integers(0, 5, size=(3, 4))
    train = forward(tokens, p, cfg, train_mode=True, rng=T.make_rng(0)).data
    assert not np.allclose(train, forward(tokens, p, cfg).data)


def test_batch_permutation_equivariance(np_rng):
    cfg = tiny()
    p = init_params(cfg, 2)
    tokens = np_rng.integers(0, 5, size=(7, 4))
    perm = np_rng.permutation(7)
    np.testing.assert_allclose(forward(tokens[perm], p, cfg).data, forward(tokens, p, cfg).data[perm], atol=1e-12)


def test_untrained_model_is_at_chance_on_mod_add_7():
    task = datasets.TaskSpec("mod_add", 7)
    x, y = datasets.to_arrays(datasets.generate(task))
    cfg = ModelConfig(vocab_size=task.vocab_size, d_model=32, n_heads=4, d_ffn=64)
    acc = np.mean(predict(forward(x, init_params(cfg, 0), cfg)) == y)
    assert abs(acc - 1 / 7) <= 0.1


def _param_grad_errors(cfg, tokens, targets, seed=0):
    params = init_params(cfg, seed)
    # at init scale the query/key gradients are ~1e-6, below finite-difference noise
    for name, t in params.items():
        if t.ndim == 2:
            t.data = t.data * 15.0
    errors = {}
    for name in params:
        def loss_of(t, name=name):
            swapped = ParamSet(params)
            swapped[name] = t
            return loss_op(forward(tokens, swapped, cfg), targets, cfg.softmax_variant)
        errors[name] = grad_check(loss_of, params[name])
    return errors


def test_end_to_end_gradient_check_two_token_vocab(np_rng):
    cfg = tiny(vocab_size=2)
    tokens = np_rng.integers(0, 2, size=(3, 4))
    errors = _param_grad_errors(cfg, tokens, np.array([0, 1, 1]))
    assert max(errors.values()) < 1e-3, errors


@pytest.mark.parametrize("variant", ["softmax", "stablemax"])
def test_end_to_end_gradient_check_four_token_batch(variant, np_rng):
    cfg = tiny(softmax_variant=variant)
    tokens = np_rng.integers(0, 5, size=(4, 4))
    errors = _param_grad_errors(cfg, tokens, np.array([0, 3, 1, 4]), seed=5)
    assert max(errors.values()) < 1e-3, errors


def test_checkpoint_round_trip(tmp_path):
    p = init_params(tiny(), 0)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    assert list(q) == list(p)
    for k in p:
        assert q[k].data.tobytes() == p[k].data.tobytes()
    raw = path.read_bytes()
    assert raw[:4] == b"GMCK"
    assert int.from_bytes(raw[4:8], "little") == len(p)
