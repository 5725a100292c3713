"""Global aggregators (NetVLAD / GeM) and the per-instance prefix assembly."""

import numpy as np
import pytest

from sia3d import ndtensor as nd
from sia3d.ndtensor import Tensor
from sia3d.dualdecoder import DecodedQueries
from sia3d.tgi import (GeM, NetVlad, SLOT_CONTEXT, SLOT_GLOBAL, SLOT_INSTANCE,
                       TgiAggregator, gem, kmeans, netvlad)


def test_netvlad_unit_norm_and_shape():
    rng = np.random.default_rng(0)
    nv = NetVlad(rng, dim=16, clusters=4, dtype=np.float64)
    feats = Tensor(rng.normal(size=(10, 16)))
    out = netvlad(feats.data, nv)
    assert out.shape == (16,)
    assert abs(np.linalg.norm(out.data) - 1.0) < 1e-6


def test_netvlad_permutation_invariance():
    rng = np.random.default_rng(1)
    nv = NetVlad(rng, dim=8, clusters=3, dtype=np.float64)
    feats = rng.normal(size=(7, 8))
    a = netvlad(feats, nv).data
    b = netvlad(feats[rng.permutation(7)], nv).data
    assert np.allclose(a, b, atol=1e-9)


def test_netvlad_single_feature_single_cluster_residual_algebra():
    # with one feature and saturated assignment, the unnormalized residual
    # block is exactly x - c; verify through the pipeline's intra-norm step
    rng = np.random.default_rng(2)
    nv = NetVlad(rng, dim=4, clusters=2, dtype=np.float64)
    x = np.asarray([1.0, 2.0, 3.0, 4.0])
    # saturate soft assignment onto cluster 0
    nv.assign.weight.data[...] = 0.0
    nv.assign.bias.data[...] = np.asarray([50.0, -50.0])
    f = Tensor(x[None, None, :])
    a = nd.softmax(nv.assign(nd.reshape(f, (1, 1, 4))), axis=-1)
    assert a.data[0, 0, 0] > 0.999999
    resid = x - nv.centers.data[0]
    expect_intra = resid / np.linalg.norm(resid)
    out_vlad = _vlad_blocks(nv, x)
    assert np.allclose(out_vlad[0], expect_intra, atol=1e-6)
    assert np.allclose(out_vlad[1], 0.0, atol=1e-6)   # unassigned cluster ~ 0


def _vlad_blocks(nv, x):
    """Intra-normalized residual blocks for a single feature."""
    f = Tensor(x[None, None, :])
    a = nd.softmax(nv.assign(nd.reshape(f, (1, 1, 4))), axis=-1)
    xe = nd.reshape(f, (1, 1, 1, 4))
    resid = nd.sub(xe, nd.reshape(nv.centers, (1, 1, 2, 4)))
    weighted = nd.mul(resid, nd.reshape(a, (1, 1, 2, 1)))
    vlad = nd.sum_(weighted, axis=1)
    return nd.l2_normalize(vlad, axis=-1).data[0]


def test_netvlad_degenerate_residual_zero_safe():
    rng = np.random.default_rng(3)
    nv = NetVlad(rng, dim=4, clusters=2, dtype=np.float64)
    nv.assign.weight.data[...] = 0.0
    nv.assign.bias.data[...] = np.asarray([50.0, -50.0])
    # feature exactly at the saturated cluster's center: residual block is 0,
    # the zero-safe normalization keeps it 0, output is still unit norm
    x = nv.centers.data[0].copy()
    out = netvlad(x[None, :], nv)
    assert np.isfinite(out.data).all()
    assert abs(np.linalg.norm(out.data) - 1.0) < 1e-6


def test_netvlad_rejects_empty_and_few_clusters():
    rng = np.random.default_rng(4)
    with pytest.raises(ValueError):
        NetVlad(rng, dim=4, clusters=1)
    nv = NetVlad(rng, dim=4, clusters=2, dtype=np.float64)
    with pytest.raises(ValueError):
        netvlad(np.zeros((0, 4)), nv)


def test_gem_p1_is_arithmetic_mean_pre_projection():
    rng = np.random.default_rng(5)
    g = GeM(rng, dim=6, dtype=np.float64)
    g.set_exponent(1.0)
    feats = Tensor(rng.normal(size=(9, 6)))
    pooled = g.pooled(nd.reshape(feats, (1, 9, 6))).data[0]
    sp = np.log1p(np.exp(-np.abs(feats.data))) + np.maximum(feats.data, 0)
    assert np.allclose(pooled, sp.mean(axis=0), atol=1e-9)


def test_gem_large_p_approaches_max():
    # exact deviation bound for 2 features: max * (1 - (1/2)**(1/p)),
    # i.e. about 1.1% relative at p = 64, and shrinking in p
    rng = np.random.default_rng(6)
    feats = rng.normal(size=(2, 5))
    sp = np.log1p(np.exp(-np.abs(feats))) + np.maximum(feats, 0)
    target = sp.max(axis=0)
    errs = {}
    for p in (64.0, 256.0):
        g = GeM(rng, dim=5, dtype=np.float64)
        g.set_exponent(p)
        pooled = g.pooled(Tensor(feats[None])).data[0]
        bound = target * (1.0 - 0.5 ** (1.0 / p)) + 1e-12
        assert np.all(np.abs(pooled - target) <= bound + 1e-9)
        errs[p] = np.abs(pooled - target).max()
    assert errs[256.0] < errs[64.0]


def test_gem_permutation_invariance_and_unit_norm():
    rng = np.random.default_rng(7)
    g = GeM(rng, dim=6, dtype=np.float64)
    feats = rng.normal(size=(8, 6))
    a = gem(feats, g).data
    b = gem(feats[rng.permutation(8)], g).data
    assert np.allclose(a, b, atol=1e-9)
    assert abs(np.linalg.norm(a) - 1.0) < 1e-6


def test_kmeans_deterministic():
    rng1 = np.random.default_rng(8)
    rng2 = np.random.default_rng(8)
    pts = np.random.default_rng(0).normal(size=(30, 4))
    assert np.allclose(kmeans(rng1, pts, 3), kmeans(rng2, pts, 3))


# -- aggregate ------------------------------------------------------------------

def _decoded(rng, m, d, kind):
    return DecodedQueries(kind=kind, V=Tensor(rng.normal(size=(m, d))), layers=[])


def _agg_inputs(rng, mo=3, mc=6, d=8):
    v_o = _decoded(rng, mo, d, "instance")
    v_c = _decoded(rng, mc, d, "context")
    pos_o = rng.uniform(0, 4, size=(mo, 3))
    pos_c = rng.uniform(0, 4, size=(mc, 3))
    return v_o, v_c, pos_o, pos_c


@pytest.mark.parametrize("k,expect", [(2, 4), (4, 6)])
def test_prefix_length_k_plus_two(k, expect):
    rng = np.random.default_rng(9)
    agg = TgiAggregator(rng, 8, k=k, clusters=2, dtype=np.float64)
    v_o, v_c, pos_o, pos_c = _agg_inputs(rng)
    prefixes, types = agg.aggregate(v_o, v_c, pos_o, pos_c)
    assert agg.prefix_length == expect
    assert prefixes[0].shape == (expect, 8)
    assert list(types) == [SLOT_INSTANCE] + [SLOT_CONTEXT] * k + [SLOT_GLOBAL]


def test_k_equals_mc_includes_all_contexts():
    rng = np.random.default_rng(10)
    agg = TgiAggregator(rng, 8, k=6, clusters=2, dtype=np.float64)
    v_o, v_c, pos_o, pos_c = _agg_inputs(rng, mc=6)
    prefixes, _ = agg.aggregate(v_o, v_c, pos_o, pos_c)
    got = np.sort(prefixes[0].data[1:7], axis=0)
    expect = np.sort(v_c.V.data, axis=0)
    assert np.allclose(got, expect, atol=1e-9)


def test_k_exceeding_mc_rejected():
    rng = np.random.default_rng(11)
    agg = TgiAggregator(rng, 8, k=9, clusters=2, dtype=np.float64)
    v_o, v_c, pos_o, pos_c = _agg_inputs(rng, mc=6)
    with pytest.raises(ValueError):
        agg.aggregate(v_o, v_c, pos_o, pos_c)


def test_nearest_first_ordering_and_tie_break():
    rng = np.random.default_rng(12)
    agg = TgiAggregator(rng, 8, k=3, clusters=2, dtype=np.float64)
    v_o = _decoded(rng, 1, 8, "instance")
    v_c = _decoded(rng, 4, 8, "context")
    pos_o = np.zeros((1, 3))
    pos_c = np.asarray([[2.0, 0, 0], [1.0, 0, 0], [1.0, 0, 0], [5.0, 0, 0]])
    prefixes, _ = agg.aggregate(v_o, v_c, pos_o, pos_c)
    ctx = prefixes[0].data[1:4]
    # equidistant contexts 1 and 2 resolve by lower index first
    assert np.allclose(ctx[0], v_c.V.data[1])
    assert np.allclose(ctx[1], v_c.V.data[2])
    assert np.allclose(ctx[2], v_c.V.data[0])


def test_moving_instance_changes_nn_set():
    rng = np.random.default_rng(13)
    agg = TgiAggregator(rng, 8, k=2, clusters=2, dtype=np.float64)
    v_o = _decoded(rng, 1, 8, "instance")
    v_c = _decoded(rng, 4, 8, "context")
    pos_c = np.asarray([[0.0, 0, 0], [0.1, 0, 0], [8.0, 0, 0], [8.1, 0, 0]])
    near, _ = agg.aggregate(v_o, v_c, np.zeros((1, 3)), pos_c)
    far, _ = agg.aggregate(v_o, v_c, np.asarray([[8.0, 0.0, 0.0]]), pos_c)
    assert np.allclose(near[0].data[1:3], v_c.V.data[[0, 1]])
    assert np.allclose(far[0].data[1:3], v_c.V.data[[2, 3]])


def test_global_descriptor_permutation_invariant_over_union():
    rng = np.random.default_rng(14)
    agg = TgiAggregator(rng, 8, k=2, clusters=2, dtype=np.float64)
    v_o, v_c, pos_o, pos_c = _agg_inputs(rng)
    p1, _ = agg.aggregate(v_o, v_c, pos_o, pos_c)
    g1 = p1[0].data[-1]
    perm = rng.permutation(6)
    v_c2 = DecodedQueries(kind="context", V=Tensor(v_c.V.data[perm]), layers=[])
    p2, _ = agg.aggregate(v_o, v_c2, pos_o, pos_c[perm])
    assert np.allclose(p2[0].data[-1], g1, atol=1e-9)
    assert abs(np.linalg.norm(g1) - 1.0) < 1e-6


def test_global_input_modes_and_no_global():
    rng = np.random.default_rng(15)
    for mode in ("all", "contexts", "single+contexts"):
        agg = TgiAggregator(rng, 8, k=2, clusters=2, global_inputs=mode,
                            dtype=np.float64)
        v_o, v_c, pos_o, pos_c = _agg_inputs(rng)
        prefixes, types = agg.aggregate(v_o, v_c, pos_o, pos_c)
        assert prefixes[0].shape == (4, 8)
    ng = TgiAggregator(rng, 8, k=2, clusters=2, use_global=False, dtype=np.float64)
    v_o, v_c, pos_o, pos_c = _agg_inputs(rng)
    prefixes, types = agg.aggregate(v_o, v_c, pos_o, pos_c)
    p_ng, t_ng = ng.aggregate(v_o, v_c, pos_o, pos_c)
    assert p_ng[0].shape == (3, 8)
    assert SLOT_GLOBAL not in list(t_ng)
    assert ng.param_count() == 0   # no pooling parameters at all


def test_netvlad_gem_interchangeable_interface():
    rng = np.random.default_rng(16)
    for kind in ("netvlad", "gem"):
        agg = TgiAggregator(rng, 8, k=2, clusters=2, kind=kind, dtype=np.float64)
        v_o, v_c, pos_o, pos_c = _agg_inputs(rng)
        prefixes, types = agg.aggregate(v_o, v_c, pos_o, pos_c)
        g = prefixes[0].data[-1]
        assert abs(np.linalg.norm(g) - 1.0) < 1e-6
