import numpy as np
import pytest
from scipy.special import logsumexp

from svkit.errors import ConfigError, DataError
from svkit.frontend import FeatureSequence
from svkit.head import (
    HeadConfig,
    aam_batch,
    aam_softmax_loss,
    cosine_logits,
    embed_batch,
    head_forward,
    init_head,
    loss_and_grads,
    stats_pool,
)
from svkit.trainer import grad_check


def fs(frames):
    return FeatureSequence(np.asarray(frames, dtype=float), 0.01, 0.025, "mfb")


def test_stats_pool_constant():
    out = stats_pool(fs(np.full((7, 3), 2.5)), 1e-5)
    np.testing.assert_allclose(out[:3], 2.5)
    np.testing.assert_allclose(out[3:], np.sqrt(1e-5), rtol=1e-12)
    assert np.sqrt(1e-5) == pytest.approx(0.00316228, abs=1e-8)


def test_stats_pool_two_frames():
    out = stats_pool(fs([[1.0], [3.0]]), 1e-5)
    assert out[0] == 2.0
    assert out[1] == pytest.approx(np.sqrt(1 + 1e-5), rel=1e-14)
    assert out[1] == pytest.approx(1.0000050, abs=1e-7)


def test_stats_pool_permutation_and_shift(rng):
    x = rng.standard_normal((40, 5))
    perm = rng.permutation(40)
    a, b = stats_pool(fs(x)), stats_pool(fs(x[perm]))
    assert np.array_equal(a, b)
    shift = rng.standard_normal(5)
    c = stats_pool(fs(x + shift))
    np.testing.assert_allclose(c[:5], a[:5] + shift, atol=1e-12)
    np.testing.assert_allclose(c[5:], a[5:], atol=1e-12)


def test_stats_pool_empty_errors():
    with pytest.raises(DataError):
        stats_pool(fs(np.zeros((0, 3))))


def small(input_dim=3, n_classes=4, k=2):
    return HeadConfig(input_dim=input_dim, n_classes=n_classes, tdnn_dim=input_dim, embed_dim=2 * input_dim, maxout_k=k)


def test_maxout_identity_pair_gives_abs(rng):
    cfg = small()
    w = init_head(cfg, 0)
    P = 2 * cfg.tdnn_dim
    w["tdnn1.weight"] = np.eye(3)
    w["tdnn2.weight"] = np.eye(3)
    w["maxout.weight"] = np.stack([np.eye(P), -np.eye(P)])
    w["maxout.bias"] = np.zeros((2, P))
    x = -np.abs(rng.standard_normal((10, 3)))  # ReLU zeros every frame
    x[:, 0] = np.abs(x[:, 0])
    pooled = stats_pool(np.maximum(x, 0))
    emb = head_forward(fs(x), w, cfg).vector
    np.testing.assert_allclose(emb, np.abs(pooled), rtol=1e-14)
    # negative mean component survives only through abs
    w["tdnn2.weight"] = -np.eye(3)
    pooled = stats_pool(-np.maximum(x, 0))
    assert pooled[0] < 0
    np.testing.assert_allclose(head_forward(fs(x), w, cfg).vector, np.abs(pooled), rtol=1e-14)


def test_zero_tdnn_weights(rng):
    cfg = small()
    w = init_head(cfg, 1)
    for k in ("tdnn1.weight", "tdnn1.bias", "tdnn2.weight", "tdnn2.bias"):
        w[k] = np.zeros_like(w[k])
    pooled = np.concatenate([np.zeros(3), np.full(3, np.sqrt(cfg.pool_eps))])
    expected = np.max(np.einsum("p,kpe->ke", pooled, w["maxout.weight"]) + w["maxout.bias"], axis=0)
    for T in (1, 5, 50):
        emb = head_forward(fs(rng.standard_normal((T, 3))), w, cfg).vector
        np.testing.assert_allclose(emb, expected, rtol=1e-14)


def test_head_frame_order_invariance(rng):
    cfg = HeadConfig(input_dim=6, n_classes=3, tdnn_dim=12, embed_dim=5)
    w = init_head(cfg, 2)
    x = rng.standard_normal((30, 6))
    a = head_forward(fs(x), w, cfg).vector
    b = head_forward(fs(x[rng.permutation(30)]), w, cfg).vector
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_head_dim_mismatch():
    cfg = small()
    with pytest.raises(DataError):
        head_forward(fs(np.zeros((4, 5))), init_head(cfg, 0), cfg)


def test_batch_matches_single(rng):
    cfg = HeadConfig(input_dim=4, n_classes=3, tdnn_dim=8, embed_dim=4)
    w = init_head(cfg, 3)
    X = rng.standard_normal((3, 11, 4))
    batch = embed_batch(X, w, cfg)
    for i in range(3):
        np.testing.assert_allclose(batch[i], head_forward(fs(X[i]), w, cfg).vector, rtol=1e-12)


def reference_aam(e, y, W, m, s):
    cos = (W / np.linalg.norm(W, axis=1, keepdims=True)) @ (e / np.linalg.norm(e))
    cos = np.clip(cos, -1 + 1e-7, 1 - 1e-7)
    logits = s * cos
    t = cos[y]
    if t > np.cos(np.pi - m):
        logits[y] = s * np.cos(np.arccos(t) + m)
    else:
        logits[y] = s * (t - m * np.sin(m))
    return logsumexp(logits) - logits[y], logits


def test_zero_margin_unit_scale_is_cross_entropy(rng):
    e = rng.standard_normal(6)
    W = rng.standard_normal((5, 6))
    res = aam_softmax_loss(e, 2, W, m=0.0, s=1.0)
    cos = (W / np.linalg.norm(W, axis=1, keepdims=True)) @ (e / np.linalg.norm(e))
    p = np.exp(cos) / np.exp(cos).sum()
    assert res.loss == pytest.approx(-np.log(p[2]), rel=1e-12)
    np.testing.assert_allclose(res.logits, cos, rtol=1e-12)


def test_closed_form_two_class_example():
    res = aam_softmax_loss(np.array([1.0, 0.0]), 0, np.array([[1.0, 0.0], [0.0, 1.0]]), m=0.35, s=32.0)
    # cos is clamped to 1 - 1e-7 before the angle is taken
    clamped = 32 * np.cos(np.arccos(1 - 1e-7) + 0.35)
    assert res.logits[0] == pytest.approx(clamped, rel=1e-12)
    assert res.logits[0] == pytest.approx(32 * np.cos(0.35), rel=2e-4)
    assert res.logits[0] == pytest.approx(30.0600, rel=2e-4)
    assert res.logits[1] == 0.0
    assert res.loss == pytest.approx(np.log1p(np.exp(-clamped)), rel=1e-6)
    assert res.loss == pytest.approx(8.8e-14, rel=0.01)


def test_matches_reference_including_fallback(rng):
    for m in (0.0, 0.2, 0.35, 1.2):
        for _ in range(20):
            e = rng.standard_normal(4)
            W = rng.standard_normal((6, 4))
            y = int(rng.integers(6))
            res = aam_softmax_loss(e, y, W, m=m, s=16.0)
            loss, logits = reference_aam(e, y, W, m, 16.0)
            assert res.loss == pytest.approx(loss, rel=1e-10, abs=1e-12)
            np.testing.assert_allclose(res.logits, logits, rtol=1e-10, atol=1e-12)


def test_fallback_branch_used():
    m = 0.35
    t = -0.99
    e = np.array([1.0, 0.0])
    W = np.array([[t, np.sqrt(1 - t * t)], [0.0, 1.0]])
    res = aam_softmax_loss(e, 0, W, m=m, s=32.0)
    assert t <= np.cos(np.pi - m)
    assert res.logits[0] == pytest.approx(32 * (t - m * np.sin(m)), rel=1e-12)


def test_target_logit_decreases_with_margin(rng):
    e = rng.standard_normal(5)
    W = rng.standard_normal((4, 5))
    theta = np.arccos(np.clip((W[1] / np.linalg.norm(W[1])) @ (e / np.linalg.norm(e)), -1, 1))
    margins = [m for m in np.linspace(0, 1.5, 16) if theta + m < np.pi]
    logits = [aam_softmax_loss(e, 1, W, m=m, s=32).logits[1] for m in margins]
    assert all(a > b for a, b in zip(logits, logits[1:]))


def test_loss_nonnegative_and_logits_linear_in_scale(rng):
    e = rng.standard_normal(5)
    W = rng.standard_normal((4, 5))
    a = aam_softmax_loss(e, 0, W, 0.35, 10.0)
    b = aam_softmax_loss(e, 0, W, 0.35, 30.0)
    assert a.loss >= 0 and b.loss >= 0
    np.testing.assert_allclose(b.logits, 3 * a.logits, rtol=1e-12)


def test_aam_zero_norm_errors():
    with pytest.raises(DataError):
        aam_softmax_loss(np.zeros(3), 0, np.eye(3))
    W = np.eye(3)
    W[1] = 0
    with pytest.raises(DataError):
        aam_softmax_loss(np.ones(3), 0, W)


def test_aam_gradients_fd(rng):
    e = rng.standard_normal(6)
    W = rng.standard_normal((5, 6))
    res = aam_softmax_loss(e, 3, W, 0.35, 32.0)
    h = 1e-6
    for i in range(6):
        d = np.zeros(6)
        d[i] = h
        num = (reference_aam(e + d, 3, W, 0.35, 32)[0] - reference_aam(e - d, 3, W, 0.35, 32)[0]) / (2 * h)
        assert res.grad_embedding[i] == pytest.approx(num, rel=1e-5, abs=1e-8)
    for j in range(5):
        for i in range(6):
            D = np.zeros_like(W)
            D[j, i] = h
            num = (reference_aam(e, 3, W + D, 0.35, 32)[0] - reference_aam(e, 3, W - D, 0.35, 32)[0]) / (2 * h)
            assert res.grad_classifier[j, i] == pytest.approx(num, rel=1e-5, abs=1e-8)


@pytest.mark.parametrize("margin", [0.35, 0.0])
def test_full_head_grad_check(rng, margin):
    cfg = HeadConfig(input_dim=8, n_classes=4, tdnn_dim=16, embed_dim=8, margin=margin)
    w = init_head(cfg, 11)
    for k in ("tdnn1.bias", "tdnn2.bias", "maxout.bias"):
        w[k] = 0.1 * rng.standard_normal(w[k].shape)
    X = rng.standard_normal((3, 12, 8))
    assert grad_check(w, cfg, X, [0, 1, 3], fd_step=1e-5, n_coords=200, seed=1) < 1e-4


def test_loss_and_grads_cover_all_tensors(rng):
    cfg = HeadConfig(input_dim=4, n_classes=3, tdnn_dim=6, embed_dim=4)
    w = init_head(cfg, 0)
    loss, grads = loss_and_grads(rng.standard_normal((2, 5, 4)), [0, 2], w, cfg)
    assert set(grads) == set(w) | {"input"}
    for k, v in w.items():
        assert grads[k].shape == v.shape


def test_cosine_logits():
    W = np.array([[2.0, 0.0], [0.0, 3.0]])
    np.testing.assert_allclose(cosine_logits(np.array([1.0, 1.0]), W, 10)[0], [10 / np.sqrt(2)] * 2)


def test_config_validation():
    with pytest.raises(ConfigError):
        HeadConfig(input_dim=4, n_classes=2, maxout_k=1)
    with pytest.raises(ConfigError):
        HeadConfig(input_dim=4, n_classes=2, margin=2.0)
    with pytest.raises(ConfigError):
        HeadConfig(input_dim=4, n_classes=2, scale=0)
