"""Embedding backends, cache transparency and TTA aggregation."""

import numpy as np
import pytest

from tripletground.core import BBox, ImageRef, normalize
from tripletground.gateway import (
    EmbeddingCache,
    InvalidRegionError,
    LabeledMockBackend,
    MockBackend,
    RegionRequest,
    embed_region,
    embed_texts,
    embed_visual_triplet,
    mock_backend,
)
from tripletground.pairing import build_visual_triplets

IMAGE = ImageRef(id="scene-1", width=100, height=100)
BOXES = [BBox(10, 10, 40, 40), BBox(50, 50, 90, 90)]


class CountingBackend(MockBackend):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.text_calls = 0
        self.region_calls = 0

    def embed_texts(self, texts):
        self.text_calls += 1
        return super().embed_texts(texts)

    def embed_regions(self, image, requests_):
        self.region_calls += 1
        return super().embed_regions(image, requests_)


class TestMockBackend:
    def test_same_seed_same_vector(self):
        a = mock_backend(7, 16).embed_texts(["cat"])[0]
        b = mock_backend(7, 16).embed_texts(["cat"])[0]
        assert a == b

    def test_different_seeds_differ(self):
        a = mock_backend(7, 16).embed_texts(["cat"])[0]
        b = mock_backend(8, 16).embed_texts(["cat"])[0]
        assert a != b

    def test_vectors_are_unit(self):
        backend = mock_backend(0, 33)  # odd dimension exercises the block tail
        for vec in embed_texts(backend, ["a", "bb", "ccc"]):
            assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-4)

    def test_region_determinism(self):
        backend = mock_backend(3, 16)
        req = RegionRequest(IMAGE, (BOXES[0],))
        first = backend.embed_regions(IMAGE, [req])
        second = backend.embed_regions(IMAGE, [req])
        assert first == second


class TestEmbedTexts:
    def test_order_preserved(self):
        backend = mock_backend(0, 16)
        vecs = embed_texts(backend, ["a", "b"])
        direct_a = normalize(backend.embed_texts(["a"])[0])
        direct_b = normalize(backend.embed_texts(["b"])[0])
        np.testing.assert_array_equal(vecs[0], direct_a)
        np.testing.assert_array_equal(vecs[1], direct_b)

    def test_batching_call_count(self):
        backend = CountingBackend(seed=0, dimension=8)
        embed_texts(backend, [f"t{i}" for i in range(10)], batch_size=4)
        assert backend.text_calls == 3  # ceil(10 / 4)

    def test_cache_transparency_bitwise(self):
        cache = EmbeddingCache()
        backend = mock_backend(5, 16)
        cold = embed_texts(backend, ["x", "y"], cache=cache)
        warm = embed_texts(backend, ["x", "y"], cache=cache)
        plain = embed_texts(backend, ["x", "y"])
        for a, b, c in zip(cold, warm, plain):
            np.testing.assert_array_equal(a, b)
            np.testing.assert_array_equal(a, c)

    def test_cached_texts_skip_backend(self):
        backend = CountingBackend(seed=0, dimension=8)
        cache = EmbeddingCache()
        embed_texts(backend, ["a", "b"], cache=cache)
        calls = backend.text_calls
        embed_texts(backend, ["a", "b"], cache=cache)
        assert backend.text_calls == calls

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError):
            embed_texts(mock_backend(0, 8), ["ok", ""])


class TestEmbedRegion:
    def test_singleton_tta_is_identity(self):
        backend = mock_backend(1, 16)
        req = RegionRequest(IMAGE, (BOXES[0],))
        via_tta = embed_region(backend, req, tta={"crop"})
        direct = normalize(backend.embed_regions(IMAGE, [req])[0])
        np.testing.assert_array_equal(via_tta, direct)

    def test_two_mode_mean_then_renormalize(self):
        backend = mock_backend(1, 16)
        u = normalize(backend.embed_regions(IMAGE, [RegionRequest(IMAGE, (BOXES[0],), "blur")])[0])
        w = normalize(backend.embed_regions(IMAGE, [RegionRequest(IMAGE, (BOXES[0],), "crop")])[0])
        expected = normalize((u + w) / 2)
        got = embed_region(backend, RegionRequest(IMAGE, (BOXES[0],)), tta={"crop", "blur"})
        np.testing.assert_array_equal(got, expected)

    def test_tta_order_invariant(self):
        backend = mock_backend(1, 16)
        req = RegionRequest(IMAGE, (BOXES[1],))
        a = embed_region(backend, req, tta=["crop", "blur"])
        b = embed_region(backend, req, tta=["blur", "crop"])
        np.testing.assert_array_equal(a, b)

    def test_out_of_bounds_rejected(self):
        with pytest.raises(InvalidRegionError):
            RegionRequest(IMAGE, (BBox(0, 0, 120, 50),))

    def test_bad_render_mode_rejected(self):
        with pytest.raises(InvalidRegionError):
            RegionRequest(IMAGE, (BOXES[0],), render="sketch")


class TestEmbedVisualTriplet:
    def test_self_relation_shares_one_request(self):
        backend = mock_backend(2, 16)
        vts = build_visual_triplets(BOXES)
        self_vt = vts[0]
        emb = embed_visual_triplet(backend, BOXES, self_vt, IMAGE)
        np.testing.assert_array_equal(emb.subject, emb.predicate)
        np.testing.assert_array_equal(emb.subject, emb.object)
        direct = embed_region(backend, RegionRequest(IMAGE, (BOXES[0],)))
        np.testing.assert_array_equal(emb.subject, direct)

    def test_pair_predicate_uses_both_boxes(self):
        backend = mock_backend(2, 16)
        vts = build_visual_triplets(BOXES)
        pair_vt = next(vt for vt in vts if (vt.subject_box, vt.object_box) == (0, 1))
        emb = embed_visual_triplet(backend, BOXES, pair_vt, IMAGE)
        expected = embed_region(backend, RegionRequest(IMAGE, (BOXES[0], BOXES[1])))
        np.testing.assert_array_equal(emb.predicate, expected)
        assert not np.array_equal(emb.predicate, emb.subject)

    def test_repeat_calls_bitwise_identical(self):
        backend = mock_backend(2, 16)
        vts = build_visual_triplets(BOXES)
        first = embed_visual_triplet(backend, BOXES, vts[1], IMAGE, tta={"crop", "blur"})
        second = embed_visual_triplet(backend, BOXES, vts[1], IMAGE, tta={"crop", "blur"})
        np.testing.assert_array_equal(first.predicate, second.predicate)


class TestLabeledMock:
    def test_label_recovery(self):
        backend = LabeledMockBackend(
            seed=0,
            dimension=32,
            text_labels={"cat": "cat", "dog": "dog"},
            region_labels={},
        )
        backend.label_region(IMAGE, [BOXES[0]], "cat")
        backend.label_region(IMAGE, [BOXES[1]], "dog")
        cat_text = embed_texts(backend, ["cat"])[0]
        cat_region = embed_region(backend, RegionRequest(IMAGE, (BOXES[0],)))
        dog_region = embed_region(backend, RegionRequest(IMAGE, (BOXES[1],)))
        assert float(cat_text @ cat_region) > 0.9
        assert float(cat_text @ dog_region) < 0.3

    def test_render_modes_share_label(self):
        backend = LabeledMockBackend(
            seed=0, dimension=32, text_labels={"cat": "cat"}, region_labels={}
        )
        backend.label_region(IMAGE, [BOXES[0]], "cat")
        crop = embed_region(backend, RegionRequest(IMAGE, (BOXES[0],), "crop"))
        blur = embed_region(backend, RegionRequest(IMAGE, (BOXES[0],), "blur"))
        assert float(crop @ blur) > 0.9
        assert not np.array_equal(crop, blur)  # noise differs per render

    def test_too_many_labels_rejected(self):
        with pytest.raises(ValueError):
            LabeledMockBackend(
                seed=0, dimension=2, text_labels={"a": "a", "b": "b", "c": "c"}
            )


class TestCacheStore:
    def test_file_round_trip(self, tmp_path):
        path = str(tmp_path / "cache.jsonl")
        backend = mock_backend(9, 16)
        first = embed_texts(backend, ["hello"], cache=EmbeddingCache(path))[0]
        reloaded = EmbeddingCache(path)
        assert len(reloaded) == 1
        second = embed_texts(backend, ["hello"], cache=reloaded)[0]
        np.testing.assert_array_equal(first, second)

    def test_idempotent_put(self, tmp_path):
        path = str(tmp_path / "cache.jsonl")
        cache = EmbeddingCache(path)
        vec = np.array([1.0, 0.0])
        cache.put("k", vec)
        cache.put("k", vec)
        with open(path) as fh:
            assert len(fh.readlines()) == 1
