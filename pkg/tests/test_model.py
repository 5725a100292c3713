"""Whole-pipeline wiring: ablations, parameter accounting, prediction."""

import numpy as np
import pytest

from sia3d import scenegen as sg
from sia3d.scenegen import build_vocab, scene_caption_corpus
from sia3d.trainer import build_model

from helpers import tiny_config


@pytest.fixture(scope="module")
def vocab():
    scenes = [sg.generate_scene(50 + i, 3, 1024) for i in range(2)]
    return build_vocab(scene_caption_corpus(scenes))


@pytest.fixture(scope="module")
def scenes():
    return [sg.generate_scene(50 + i, 3, 1024) for i in range(2)]


def test_param_count_independent_of_k(vocab):
    counts = {}
    for k in (2, 4, 8):
        model = build_model(tiny_config(k_nearest=k), vocab)
        counts[k] = model.param_count()
    assert len(set(counts.values())) == 1


def test_prefix_lengths_track_k(vocab):
    for k, expect in ((2, 4), (4, 6), (8, 10)):
        model = build_model(tiny_config(k_nearest=k, m_context=16), vocab)
        assert model.caption_prefix_length("context") == expect
        assert model.caption_prefix_length("instance") == 1


def test_no_global_removes_exactly_the_pooling_params(vocab):
    full = build_model(tiny_config(), vocab)
    bare = build_model(tiny_config(no_global=True), vocab)
    delta = full.param_count() - bare.param_count()
    assert delta == full.aggregator.pool.param_count()
    assert bare.aggregator.pool is None if hasattr(bare.aggregator, "pool") else True


def test_instance_only_removes_context_path(vocab):
    full = build_model(tiny_config(), vocab)
    solo = build_model(tiny_config(instance_only=True), vocab)
    removed = (full.context_gen.param_count()
               + full.context_decoder.param_count()
               + full.aggregator.param_count())
    assert full.param_count() - solo.param_count() == removed
    assert solo.context_gen is None and solo.aggregator is None


def test_gem_flag_swaps_aggregator(vocab):
    m = build_model(tiny_config(aggregator="gem"), vocab)
    from sia3d.tgi import GeM
    assert isinstance(m.aggregator.pool, GeM)


def test_detector_caption_parameter_split_partitions_model(vocab):
    model = build_model(tiny_config(), vocab)
    det = {id(p) for p in model.detector_parameters()}
    cap = {id(p) for p in model.caption_parameters()}
    assert not det & cap
    assert len(det) + len(cap) == len(list(model.parameters()))


def test_caption_head_shared_between_prefix_kinds(vocab):
    # the same head object (same parameter set) serves the single-token
    # instance prefix and the aggregated context prefix
    model = build_model(tiny_config(), vocab)
    assert model.caption_head is model.caption_head  # one attribute, one object
    ids = {id(p) for p in model.caption_head.parameters()}
    assert ids  # and its parameters appear once in the model inventory
    all_ids = [id(p) for p in model.parameters()]
    for i in ids:
        assert all_ids.count(i) == 1


def test_forward_batch_rejects_mixed_point_counts(vocab, scenes):
    model = build_model(tiny_config(), vocab)
    other = sg.generate_scene(999, 3, 2048)
    with pytest.raises(ValueError):
        model.forward_batch([scenes[0], other])


def test_predict_outputs_consistent_captions(vocab, scenes):
    model = build_model(tiny_config(), vocab)
    objs = model.predict(scenes[0])
    for o in objs:
        assert o.final_tokens == o.instance_tokens + o.context_tokens
        assert all(min(o.box.size) > 0 for _ in (0,))
    # deterministic across calls
    objs2 = model.predict(scenes[0])
    assert [o.final_tokens for o in objs] == [o.final_tokens for o in objs2]
    assert [round(o.confidence, 9) for o in objs] == [round(o.confidence, 9) for o in objs2]


def test_predict_instance_only_has_empty_context(vocab, scenes):
    model = build_model(tiny_config(instance_only=True), vocab)
    objs = model.predict(scenes[0])
    assert objs
    for o in objs:
        assert o.context_tokens == []
        assert o.final_tokens == o.instance_tokens


def test_max_proposals_cap(vocab, scenes):
    model = build_model(tiny_config(), vocab)
    objs = model.predict(scenes[0], max_proposals=3)
    assert len(objs) <= 3
