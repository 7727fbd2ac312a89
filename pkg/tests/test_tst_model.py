import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pulse_sysid.tst import model as tm
from pulse_sysid.tst.model import TstConfig, TstError, TstModel

SMALL = TstConfig(context_len=16, horizon=4, patch_len=4, d_model=8, n_heads=2, n_layers=2, d_ff=16, dropout=0.0)


def inputs(cfg, B=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(B, cfg.context_len, 2)), rng.normal(size=(B, cfg.horizon)), rng.normal(size=(B, cfg.horizon))


def expected_count(cfg):
    d, f, H, N, P, nl = cfg.d_model, cfg.d_ff, cfg.horizon, cfg.n_patches, cfg.patch_len, cfg.n_layers
    emb = 2 * P * d + d + N * d
    layer = 4 * (d * d + d) + 4 * d + (d * f + f) + (f * d + d)
    head = 2 * d + (H * d + d) + (2 * d * d + d) + (d * H + H)
    return emb + nl * layer + head


def test_reference_parameter_count():
    cfg = TstConfig.reference()
    assert tm.param_count(cfg) == 3_348_800
    assert tm.param_count(cfg) == expected_count(cfg)
    # positional table is learned, (N, d) = (64, 256)
    assert tm.param_shapes(cfg)["pos"] == (64, 256)
    assert tm.param_count(cfg) - 64 * 256 == 3_348_800 - 16_384


@given(st.sampled_from([4, 8]), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(1, 40),
       st.integers(1, 12))
def test_parameter_count_formula(P, n_patch, heads, layers, dff, H):
    cfg = TstConfig(context_len=P * n_patch, horizon=H, patch_len=P, d_model=8, n_heads=heads, n_layers=layers,
                    d_ff=dff)
    assert tm.param_count(TstModel.init(cfg)) == expected_count(cfg)


def test_zero_network_outputs_zero():
    ctx, fut, _ = inputs(SMALL)
    out = tm.forward(TstModel.zeros(SMALL), ctx, fut)
    assert out.shape == (3, 4) and np.all(out == 0)


def test_zero_queries_give_uniform_attention():
    m = TstModel.init(SMALL, seed=1)
    for l in range(SMALL.n_layers):
        m.params[f"layer{l}.Wq"][:] = 0
        m.params[f"layer{l}.bq"][:] = 0
    ctx, fut, _ = inputs(SMALL)
    _, cache = tm.forward(m, ctx, fut, return_cache=True)
    for layer in cache["layers"]:
        np.testing.assert_allclose(layer[5], 1.0 / SMALL.n_patches, rtol=1e-12)


def test_softmax_rows_sum_to_one():
    s = np.random.default_rng(0).normal(size=(4, 5, 7)) * 50
    np.testing.assert_allclose(tm.softmax(s).sum(-1), 1.0, rtol=1e-12)


def gradient_check(model, ctx, fut, tgt, training=False, seed=0, n_probe=6, h=1e-6):
    loss, grads = tm.loss_and_grad(model, ctx, fut, tgt, training, seed)
    noise = 8 * np.finfo(float).eps * max(1.0, loss) / (2 * h)
    rng = np.random.default_rng(0)
    worst = 0.0
    for k, p in model.params.items():
        flat = p.reshape(-1)
        idx = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            lp = tm.mse(tm.forward(model, ctx, fut, training, seed), tgt)
            flat[i] = old - h
            lm = tm.mse(tm.forward(model, ctx, fut, training, seed), tgt)
            flat[i] = old
            num[j] = (lp - lm) / (2 * h)
        ana = grads[k].reshape(-1)[idx]
        scale = max(np.abs(num).max(), np.abs(ana).max())
        if scale <= noise:  # identically zero gradient, e.g. key biases
            assert np.abs(num - ana).max() <= noise and k.endswith(".bk"), k
            continue
        worst = max(worst, np.abs(num - ana).max() / scale)
    return worst


def test_gradient_matches_finite_differences():
    m = TstModel.init(SMALL, seed=3)
    ctx, fut, tgt = inputs(SMALL, seed=3)
    assert gradient_check(m, ctx, fut, tgt) < 1e-5


def test_gradient_with_dropout_masks():
    cfg = TstConfig(**{**SMALL.to_dict(), "dropout": 0.2})
    m = TstModel.init(cfg, seed=4)
    ctx, fut, tgt = inputs(cfg, seed=4)
    assert gradient_check(m, ctx, fut, tgt, training=True, seed=11) < 1e-5


def test_zero_gradient_at_exact_fit():
    m = TstModel.init(SMALL, seed=5)
    ctx, fut, _ = inputs(SMALL, seed=5)
    tgt = tm.forward(m, ctx, fut)
    loss, grads = tm.loss_and_grad(m, ctx, fut, tgt)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads.values())


def test_duplicated_batch_gives_same_gradient():
    m = TstModel.init(SMALL, seed=6)
    ctx, fut, tgt = inputs(SMALL, seed=6)
    l1, g1 = tm.loss_and_grad(m, ctx, fut, tgt)
    l2, g2 = tm.loss_and_grad(m, np.concatenate([ctx, ctx]), np.concatenate([fut, fut]), np.concatenate([tgt, tgt]))
    assert l2 == pytest.approx(l1, rel=1e-12)
    for k in g1:
        np.testing.assert_allclose(g2[k], g1[k], rtol=1e-9, atol=1e-14)


def test_inference_is_deterministic_and_seed_free():
    m = TstModel.init(TstConfig(**{**SMALL.to_dict(), "dropout": 0.3}), seed=7)
    ctx, fut, _ = inputs(m.cfg)
    a = tm.forward(m, ctx, fut, training=False, seed=1)
    b = tm.forward(m, ctx, fut, training=False, seed=99)
    np.testing.assert_array_equal(a, b)


def test_training_dropout_is_seeded():
    m = TstModel.init(TstConfig(**{**SMALL.to_dict(), "dropout": 0.3}), seed=7)
    ctx, fut, _ = inputs(m.cfg)
    a = tm.forward(m, ctx, fut, training=True, seed=1)
    b = tm.forward(m, ctx, fut, training=True, seed=1)
    c = tm.forward(m, ctx, fut, training=True, seed=2)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_batch_rows_are_independent():
    m = TstModel.init(SMALL, seed=8)
    ctx, fut, _ = inputs(SMALL, B=4, seed=8)
    full = tm.forward(m, ctx, fut)
    ctx2, fut2 = ctx.copy(), fut.copy()
    ctx2[1:] += 5.0
    fut2[1:] -= 3.0
    np.testing.assert_allclose(tm.forward(m, ctx2, fut2)[0], full[0], rtol=1e-12, atol=1e-15)
    for b in range(4):
        np.testing.assert_allclose(tm.forward(m, ctx[b:b + 1], fut[b:b + 1])[0], full[b], rtol=1e-10, atol=1e-14)


@given(st.integers(1, 4), st.sampled_from([1, 2, 4, 8]), st.integers(1, 6))
def test_patching_is_lossless(B, P, n):
    x = np.random.default_rng(B * 100 + P + n).normal(size=(B, P * n, 2))
    p = tm.patchify(x, P)
    assert p.shape == (B, n, 2 * P)
    np.testing.assert_array_equal(tm.unpatchify(p, P), x)
    # each patch interleaves the two channels sample by sample
    np.testing.assert_array_equal(p[:, 0, :2], x[:, 0, :])


def test_gelu_is_exact_erf_form():
    x = np.linspace(-4, 4, 17)
    ref = np.array([0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x])
    np.testing.assert_allclose(tm.gelu(x), ref, rtol=1e-14, atol=1e-16)
    h = 1e-6
    np.testing.assert_allclose(tm.gelu_grad(x), (tm.gelu(x + h) - tm.gelu(x - h)) / (2 * h), rtol=1e-7, atol=1e-9)


def test_shape_errors():
    m = TstModel.init(SMALL)
    with pytest.raises(TstError):
        tm.forward(m, np.zeros((2, 15, 2)), np.zeros((2, 4)))
    with pytest.raises(TstError):
        tm.forward(m, np.zeros((2, 16, 2)), np.zeros((2, 5)))
    with pytest.raises(TstError):
        tm.mse(np.zeros(3), np.zeros(4))


def test_non_finite_activations_raise():
    m = TstModel.init(SMALL)
    ctx, fut, _ = inputs(SMALL)
    ctx[0, 3, 0] = np.nan
    with pytest.raises(TstError, match="non-finite"):
        tm.forward(m, ctx, fut)


@pytest.mark.parametrize("kw", [dict(patch_len=5), dict(n_heads=3), dict(dropout=1.0), dict(d_model=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TstConfig(**{**SMALL.to_dict(), **kw})


def test_checkpoint_round_trip(tmp_path):
    m = TstModel.init(SMALL, seed=9)
    m.save(tmp_path / "t.npz", extra={"best_epoch": 3})
    back, header = TstModel.load(tmp_path / "t.npz")
    assert back.cfg == SMALL and header["best_epoch"] == 3
    ctx, fut, _ = inputs(SMALL)
    np.testing.assert_array_equal(tm.forward(back, ctx, fut), tm.forward(m, ctx, fut))


def test_reference_config_forward_shape():
    cfg = TstConfig.reference()
    m = TstModel.init(cfg, seed=0)
    out = tm.forward(m, np.zeros((1, 1024, 2)), np.zeros((1, 64)))
    assert out.shape == (1, 64) and np.all(np.isfinite(out))
