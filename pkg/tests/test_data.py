"""Synthetic scenes: determinism, geometry bounds, COCO roundtrip and errors."""

import json
import os

import numpy as np
import pytest

from deco.config import DataConfig
from deco.data import (CLASS_NAMES, CocoFormatError, Scene, flip_scene_horizontal,
                       generate_dataset, generate_scene, normalize_image,
                       read_coco, scene_to_uint8, uint8_to_image, write_coco)


def small_cfg(**kw):
    base = dict(seed=3, count=20, holdout=5, image_size=64, objects_min=1,
                objects_max=3, size_min=10, size_max=24)
    base.update(kw)
    return DataConfig(**base)


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        cfg = small_cfg()
        a = generate_scene(cfg, 7)
        b = generate_scene(cfg, 7)
        np.testing.assert_array_equal(a.image, b.image)
        assert len(a.annotations) == len(b.annotations)
        for (ca, ba), (cb, bb) in zip(a.annotations, b.annotations):
            assert ca == cb
            np.testing.assert_array_equal(ba, bb)

    def test_different_index_different_scene(self):
        cfg = small_cfg()
        a = generate_scene(cfg, 0)
        b = generate_scene(cfg, 1)
        assert np.abs(a.image - b.image).max() > 0.01

    def test_different_seed_different_scene(self):
        a = generate_scene(small_cfg(seed=1), 0)
        b = generate_scene(small_cfg(seed=2), 0)
        assert np.abs(a.image - b.image).max() > 0.01


class TestSceneGeometry:
    def test_counts_in_range(self):
        cfg = small_cfg()
        counts = [len(generate_scene(cfg, i).annotations) for i in range(60)]
        assert min(counts) >= cfg.objects_min
        assert max(counts) <= cfg.objects_max

    def test_exact_count_when_min_equals_max(self):
        cfg = small_cfg(objects_min=3, objects_max=3)
        for i in range(30):
            assert len(generate_scene(cfg, i).annotations) == 3

    def test_dense_scenes_keep_exact_count(self):
        # ten objects on a small canvas forces the crowded-placement fallback
        cfg = DataConfig(seed=5, count=10, holdout=2, image_size=96, objects_min=10,
                         objects_max=10, size_min=10, size_max=18)
        for i in range(10):
            assert len(generate_scene(cfg, i).annotations) == 10

    def test_boxes_normalized_and_tight(self):
        cfg = small_cfg()
        for i in range(30):
            scene = generate_scene(cfg, i)
            for _, box in scene.annotations:
                cx, cy, w, h = box
                assert 0 < w <= 1 and 0 < h <= 1
                assert 0 <= cx - w / 2 and cx + w / 2 <= 1
                assert 0 <= cy - h / 2 and cy + h / 2 <= 1

    def test_image_range_and_dtype(self):
        scene = generate_scene(small_cfg(), 0)
        assert scene.image.dtype == np.float32
        assert scene.image.shape == (3, 64, 64)
        assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0

    def test_all_classes_appear(self):
        cfg = small_cfg()
        seen = set()
        for i in range(80):
            seen.update(c for c, _ in generate_scene(cfg, i).annotations)
        assert seen == {0, 1, 2}
        assert len(CLASS_NAMES) == 3


class TestHelpers:
    def test_uint8_roundtrip_quantization(self):
        scene = generate_scene(small_cfg(), 2)
        back = uint8_to_image(scene_to_uint8(scene))
        assert np.abs(back - scene.image).max() <= 0.5 / 255.0 + 1e-6

    def test_normalize_image(self):
        img = np.full((3, 4, 4), 0.75, np.float32)
        out = normalize_image(img, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
        np.testing.assert_allclose(out, 0.5, atol=1e-6)

    def test_flip_mirrors_boxes(self):
        cfg = small_cfg()
        scene = generate_scene(cfg, 4)
        flipped, anns = flip_scene_horizontal(scene.image, scene.annotations)
        np.testing.assert_array_equal(flipped[:, :, 0], scene.image[:, :, -1])
        for (c0, b0), (c1, b1) in zip(scene.annotations, anns):
            assert c0 == c1
            assert b1[0] == pytest.approx(1.0 - b0[0])
            np.testing.assert_array_equal(b0[1:], b1[1:])

    def test_double_flip_is_identity(self):
        scene = generate_scene(small_cfg(), 9)
        once_img, once_ann = flip_scene_horizontal(scene.image, scene.annotations)
        twice_img, twice_ann = flip_scene_horizontal(once_img, once_ann)
        np.testing.assert_array_equal(twice_img, scene.image)
        for (c0, b0), (c1, b1) in zip(scene.annotations, twice_ann):
            np.testing.assert_allclose(b0, b1, atol=1e-12)


class TestCocoRoundtrip:
    def test_write_read_preserves_annotations(self, tmp_path):
        cfg = small_cfg()
        scenes = generate_dataset(cfg, 0, 6)
        write_coco(scenes, str(tmp_path))
        back = read_coco(str(tmp_path))
        assert [s.index for s in back] == [0, 1, 2, 3, 4, 5]
        for orig, loaded in zip(scenes, back):
            assert len(orig.annotations) == len(loaded.annotations)
            for (c0, b0), (c1, b1) in zip(orig.annotations, loaded.annotations):
                assert c0 == c1
                np.testing.assert_allclose(b0, b1, atol=1e-9)
            # PNG roundtrip quantizes to 1/255
            assert np.abs(orig.image - loaded.image).max() <= 0.5 / 255.0 + 1e-6

    def test_read_sorted_by_image_id(self, tmp_path):
        cfg = small_cfg()
        scenes = [generate_scene(cfg, i) for i in (5, 1, 3)]
        write_coco(scenes, str(tmp_path))
        back = read_coco(str(tmp_path))
        assert [s.index for s in back] == [1, 3, 5]


def _write_payload(tmp_path, payload):
    os.makedirs(tmp_path / "images", exist_ok=True)
    with open(tmp_path / "annotations.json", "w") as fh:
        json.dump(payload, fh)


class TestCocoErrors:
    def base_payload(self):
        return {
            "images": [{"id": 1, "width": 8, "height": 8, "file_name": "x.png"}],
            "annotations": [{"id": 10, "image_id": 1, "category_id": 0,
                             "bbox": [1, 1, 3, 3], "area": 9, "iscrowd": 0}],
            "categories": [{"id": 0, "name": "disk"}],
        }

    def test_missing_top_level_key(self, tmp_path):
        payload = self.base_payload()
        del payload["categories"]
        _write_payload(tmp_path, payload)
        with pytest.raises(CocoFormatError, match="categories"):
            read_coco(str(tmp_path), load_images=False)

    def test_dangling_image_reference(self, tmp_path):
        payload = self.base_payload()
        payload["annotations"][0]["image_id"] = 99
        _write_payload(tmp_path, payload)
        with pytest.raises(CocoFormatError, match="unknown image 99"):
            read_coco(str(tmp_path), load_images=False)

    def test_nonpositive_bbox(self, tmp_path):
        payload = self.base_payload()
        payload["annotations"][0]["bbox"] = [1, 1, 0, 3]
        _write_payload(tmp_path, payload)
        with pytest.raises(CocoFormatError, match="annotation 10"):
            read_coco(str(tmp_path), load_images=False)

    def test_duplicate_image_id(self, tmp_path):
        payload = self.base_payload()
        payload["images"].append(dict(payload["images"][0]))
        _write_payload(tmp_path, payload)
        with pytest.raises(CocoFormatError, match="twice"):
            read_coco(str(tmp_path), load_images=False)

    def test_missing_annotation_key(self, tmp_path):
        payload = self.base_payload()
        del payload["annotations"][0]["bbox"]
        _write_payload(tmp_path, payload)
        with pytest.raises(CocoFormatError, match="bbox"):
            read_coco(str(tmp_path), load_images=False)
