"""Scene tokenizer and masked encoder contracts."""

import numpy as np
import pytest

from sia3d import ndtensor as nd
from sia3d.backbone import Backbone, EncoderConfig, SceneTokens
from sia3d.scenegen import generate_scene


def _small_backbone(seed=0, **kw):
    cfg = dict(t_tokens=32, dim=24, heads=4, n_layers=2, ffn_dim=48,
               tokenize_nsample=16)
    cfg.update(kw)
    return Backbone(np.random.default_rng(seed), EncoderConfig(**cfg), dtype=np.float64)


class _RawScene:
    def __init__(self, points, features, diag=9.0):
        self.points = points
        self.features = features
        self._diag = diag

    @property
    def n_points(self):
        return self.points.shape[0]

    def room_diag(self):
        return self._diag


def test_tokenize_shapes_and_alignment():
    bb = _small_backbone()
    sc = generate_scene(1, 3, 1024)
    toks = bb.tokenize(sc, seed=0)
    assert toks.p_enc.shape == (32, 3)
    assert toks.f_enc.shape == (32, 24)


def test_tokenize_rejects_too_few_points():
    bb = _small_backbone()
    sc = _RawScene(np.zeros((8, 3)), np.zeros((8, 3)))
    with pytest.raises(ValueError):
        bb.tokenize(sc)


def test_identical_points_identical_tokens():
    bb = _small_backbone()
    pts = np.zeros((64, 3))
    feats = np.full((64, 3), 0.5)
    toks = bb.tokenize(_RawScene(pts, feats))
    first = toks.f_enc.data[0]
    assert np.allclose(toks.f_enc.data, first[None, :])


def test_permuted_points_same_token_multiset():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 4, size=(128, 3))
    feats = rng.uniform(size=(128, 3))
    bb = _small_backbone()
    toks = bb.tokenize(_RawScene(pts, feats), seed=0)
    perm = rng.permutation(128)
    inv_seed = int(np.nonzero(perm == 0)[0][0])   # same physical seed point
    toks_p = bb.tokenize(_RawScene(pts[perm], feats[perm]), seed=inv_seed)
    a = np.sort(np.round(toks.f_enc.data, 8), axis=0)
    b = np.sort(np.round(toks_p.f_enc.data, 8), axis=0)
    assert np.allclose(a, b, atol=1e-6)


def test_distinct_clusters_distinct_tokens():
    rng = np.random.default_rng(4)
    centers = np.asarray([[0, 0, 0], [6, 0, 0], [0, 6, 0], [6, 6, 0]], dtype=float)
    pts, cols = [], []
    palette = np.asarray([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0]], dtype=float)
    for c, col in zip(centers, palette):
        pts.append(c + rng.normal(0, 0.05, size=(32, 3)))
        cols.append(np.tile(col, (32, 1)))
    sc = _RawScene(np.concatenate(pts), np.concatenate(cols))
    bb = _small_backbone(t_tokens=4, tokenize_nsample=16)
    toks = bb.tokenize(sc, seed=0)
    f = toks.f_enc.data
    for i in range(4):
        for j in range(i + 1, 4):
            assert not np.allclose(f[i], f[j], atol=1e-6)


def test_encode_positions_pass_through_and_shape():
    bb = _small_backbone()
    sc = generate_scene(2, 3, 1024)
    toks = bb.tokenize(sc, seed=0)
    enc = bb.encode(toks)
    assert np.array_equal(enc.p_enc, toks.p_enc)
    assert enc.f_enc.shape == toks.f_enc.shape


def test_infinite_mask_radius_equals_plain_attention():
    sc = generate_scene(5, 3, 1024)
    bb_inf = _small_backbone(mask_radius=1e9)
    toks = bb_inf.tokenize(sc, seed=0)
    enc_masked = bb_inf.encoder.forward_batch(toks.p_enc[None],
                                              nd.reshape(toks.f_enc, (1, 32, 24)),
                                              [sc.room_diag()])
    # same encoder forced to treat layer 0 as unmasked
    feats = nd.reshape(toks.f_enc, (1, 32, 24))
    from sia3d.nn import fourier_positions
    pos = fourier_positions(toks.p_enc[None], 24)
    x = feats
    for layer in bb_inf.encoder.layers:
        x = layer(x, pos=pos, allowed=None)
    plain = bb_inf.encoder.final_ln(x)
    assert np.allclose(enc_masked.data, plain.data, atol=1e-6)


def test_masked_layer_blocks_far_token():
    # two tokens far apart, single masked layer: zeroing the other token's
    # feature must not change a token's output
    rng = np.random.default_rng(6)
    bb = _small_backbone(n_layers=1, mask_radius=0.5)
    pos = np.asarray([[0.0, 0, 0], [50.0, 0, 0]])[None]
    f1 = rng.normal(size=(1, 2, 24))
    f2 = f1.copy()
    f2[0, 1] = 0.0
    out1 = bb.encoder.forward_batch(pos, nd.Tensor(f1), [9.0]).data
    out2 = bb.encoder.forward_batch(pos, nd.Tensor(f2), [9.0]).data
    assert np.allclose(out1[0, 0], out2[0, 0], atol=1e-9)
    assert not np.allclose(out1[0, 1], out2[0, 1], atol=1e-6)


def test_attention_rows_are_probabilities_after_masking():
    bb = _small_backbone()
    sc = generate_scene(7, 3, 1024)
    toks = bb.tokenize(sc, seed=0)
    bb.encode(toks)
    attn = bb.encoder.layers[0].attn.last_attn
    assert np.allclose(attn.sum(axis=-1), 1.0, atol=1e-6)


def test_encode_deterministic_in_eval_mode():
    bb = _small_backbone(dropout=0.3)
    bb.eval()
    sc = generate_scene(8, 3, 1024)
    toks = bb.tokenize(sc, seed=0)
    a = bb.encode(toks).f_enc.data
    b = bb.encode(SceneTokens(p_enc=toks.p_enc, f_enc=nd.Tensor(toks.f_enc.data.copy()),
                              room_diag=toks.room_diag)).f_enc.data
    assert np.array_equal(a, b)


def test_gradient_reaches_tokenizer_mlp():
    bb = _small_backbone()
    sc = generate_scene(9, 3, 1024)
    enc = bb.encode(bb.tokenize(sc, seed=0))
    nd.backward(nd.sum_(nd.mul(enc.f_enc, enc.f_enc)))
    grads = [p.grad for p in bb.tokenizer.parameters()]
    assert all(g is not None for g in grads)
    assert any(np.abs(g).sum() > 0 for g in grads)
