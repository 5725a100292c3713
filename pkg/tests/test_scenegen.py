"""Synthetic scenes: determinism, caption-geometry consistency, persistence."""

import numpy as np
import pytest

from sia3d.geometry import Box3D, iou_3d
from sia3d.scenegen import (DatasetFormatError, DatasetVersionError, GtInstance,
                            PlacementError, Vocabulary, build_vocab,
                            composed_references, generate_scene, global_position,
                            load_dataset, nearest_instance, relation_between,
                            save_dataset, scene_caption_corpus)


def test_fixed_seed_reproducibility():
    a = generate_scene(7, 3, 1024)
    b = generate_scene(7, 3, 1024)
    assert a.scene_id == b.scene_id
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.features, b.features)
    assert [i.captions for i in a.instances] == [i.captions for i in b.instances]


def test_scene_structural_invariants():
    for seed in range(5):
        sc = generate_scene(seed, 4, 1024)
        ex, ey, ez = sc.room_size
        for inst in sc.instances:
            mn, mx = inst.box.min_corner, inst.box.max_corner
            assert mn[0] >= -1e-9 and mn[1] >= -1e-9 and mn[2] >= -1e-9
            assert mx[0] <= ex + 1e-9 and mx[1] <= ey + 1e-9 and mx[2] <= ez + 1e-9
            assert len(inst.captions) >= 2
        # boxes pairwise disjoint
        for i in range(len(sc.instances)):
            for j in range(i + 1, len(sc.instances)):
                assert iou_3d(sc.instances[i].box, sc.instances[j].box) == 0.0


def test_relation_captions_rederivable_from_boxes():
    for seed in (3, 11, 42):
        sc = generate_scene(seed, 5, 1024)
        for i, inst in enumerate(sc.instances):
            j = nearest_instance(sc.instances, i)
            rel = relation_between(inst.box, sc.instances[j].box)
            expected = f"it is {rel} the {sc.instances[j].class_label} .".split()
            assert inst.captions[1] == expected
            where = global_position(inst.box, sc.room_size)
            assert inst.captions[2] == f"it is in the {where} of the room .".split()


def test_left_of_rule():
    a = Box3D((0.0, 0.0, 0.5), (1, 1, 1))
    b = Box3D((3.0, 0.2, 0.5), (1, 1, 1))   # y-extents overlap, x disjoint
    assert relation_between(a, b) == "left of"
    assert relation_between(b, a) == "right of"


def test_front_behind_and_next_to_rules():
    a = Box3D((0.0, 0.0, 0.5), (1, 1, 1))
    b = Box3D((0.2, 3.0, 0.5), (1, 1, 1))
    assert relation_between(a, b) == "in front of"
    assert relation_between(b, a) == "behind"
    c = Box3D((3.0, 3.0, 0.5), (1, 1, 1))   # diagonal
    assert relation_between(a, c) == "next to"


def test_global_position_rule():
    room = (6.0, 6.0, 3.0)
    assert global_position(Box3D((3.0, 3.0, 0.5), (1, 1, 1)), room) == "middle"
    assert global_position(Box3D((0.5, 0.5, 0.5), (1, 1, 1)), room) == "corner"
    # near one wall only is still "middle"
    assert global_position(Box3D((0.5, 3.0, 0.5), (1, 1, 1)), room) == "middle"


def test_centered_object_caption_contains_middle():
    sc = generate_scene(123, 3, 1024)
    ex, ey, _ = sc.room_size
    center_box = Box3D((ex / 2, ey / 2, 0.5), (1, 1, 1))
    assert global_position(center_box, sc.room_size) == "middle"


def test_placement_error_names_seed():
    with pytest.raises(ValueError):
        generate_scene(0, 13, 1024)   # over catalog size
    # n_points below floor
    with pytest.raises(ValueError):
        generate_scene(0, 3, 100)


def test_points_feature_shape_and_range():
    sc = generate_scene(9, 3, 2048)
    assert sc.points.shape == (2048, 3)
    assert sc.features.shape == (2048, 3)
    assert sc.features.min() >= 0.0 and sc.features.max() <= 1.0
    assert sc.points.dtype == np.float32


# -- vocabulary ---------------------------------------------------------------

def test_build_vocab_counts_and_order():
    vocab = build_vocab([["a", "b"], ["b", "c"]])
    assert len(vocab) == 7
    assert vocab.tokens[:4] == ["[PAD]", "[BOS]", "[EOS]", "[UNK]"]
    assert vocab.tokens[4:] == ["a", "b", "c"]


def test_vocab_rejects_empty_token():
    with pytest.raises(ValueError):
        build_vocab([["a", ""]])


def test_vocab_round_trip():
    vocab = build_vocab([["this", "is", "a", "chair", "."]])
    ids = vocab.encode(["this", "is", "a", "chair", "."])
    assert vocab.encode(vocab.decode(ids)) == ids
    assert vocab.encode(["zebra"]) == [vocab.unk_id]


def test_vocab_ids_dense_and_specials_fixed():
    vocab = build_vocab([["x"]])
    assert [vocab.index[t] for t in vocab.tokens] == list(range(len(vocab)))
    assert (vocab.pad_id, vocab.bos_id, vocab.eos_id, vocab.unk_id) == (0, 1, 2, 3)


def test_composed_references():
    sc = generate_scene(4, 3, 1024)
    inst = sc.instances[0]
    comp = composed_references(inst)
    assert len(comp) == len(inst.captions) - 1
    assert comp[0] == inst.captions[0] + inst.captions[1]


# -- persistence ----------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    scenes = [generate_scene(i, 3, 1024) for i in range(10)]
    path = tmp_path / "ds.sia"
    save_dataset(path, scenes)
    back = load_dataset(path)
    assert len(back) == 10
    for a, b in zip(scenes, back):
        assert a.scene_id == b.scene_id
        assert np.array_equal(a.points, b.points)      # bit-exact fp32
        assert np.array_equal(a.features, b.features)
        assert len(a.instances) == len(b.instances)
        for ia, ib in zip(a.instances, b.instances):
            assert ia.class_label == ib.class_label
            assert ia.color_label == ib.color_label
            assert ia.captions == ib.captions
            assert np.allclose(ia.box.as_array(), ib.box.as_array(), atol=1e-6)


def test_caption_count_preserved(tmp_path):
    scenes = [generate_scene(i, 4, 1024) for i in range(5)]
    path = tmp_path / "ds.sia"
    save_dataset(path, scenes)
    back = load_dataset(path)
    n_before = sum(len(i.captions) for s in scenes for i in s.instances)
    n_after = sum(len(i.captions) for s in back for i in s.instances)
    assert n_before == n_after
    manifest = (str(path) + ".manifest.tsv")
    lines = [l for l in open(manifest, encoding="utf-8").read().splitlines() if l]
    assert len(lines) == n_before


def test_truncated_file_raises_with_offset(tmp_path):
    scenes = [generate_scene(0, 3, 1024)]
    path = tmp_path / "ds.sia"
    save_dataset(path, scenes)
    raw = open(path, "rb").read()
    bad = tmp_path / "bad.sia"
    bad.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(DatasetFormatError) as ei:
        load_dataset(bad)
    assert "byte" in str(ei.value)


def test_version_mismatch(tmp_path):
    import struct
    import zlib
    scenes = [generate_scene(0, 3, 1024)]
    path = tmp_path / "ds.sia"
    save_dataset(path, scenes)
    raw = bytearray(open(path, "rb").read())
    raw[4] = 99   # bump the version field, then re-sign the payload
    body = bytes(raw[:-4])
    bad = tmp_path / "v99.sia"
    bad.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    with pytest.raises(DatasetVersionError):
        load_dataset(bad)


def test_corruption_detected_by_checksum(tmp_path):
    scenes = [generate_scene(0, 3, 1024)]
    path = tmp_path / "ds.sia"
    save_dataset(path, scenes)
    raw = bytearray(open(path, "rb").read())
    raw[30] ^= 0xFF
    bad = tmp_path / "corrupt.sia"
    bad.write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError):
        load_dataset(bad)


def test_bad_magic(tmp_path):
    bad = tmp_path / "junk.sia"
    bad.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(DatasetFormatError):
        load_dataset(bad)


def test_scene_caption_corpus_size():
    scenes = [generate_scene(i, 3, 1024) for i in range(3)]
    corpus = scene_caption_corpus(scenes)
    assert len(corpus) == sum(len(i.captions) for s in scenes for i in s.instances)
