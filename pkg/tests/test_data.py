import json
import math
from collections import Counter

import numpy as np
import pytest
from PIL import Image

from dtjrd.data import (
    ObjectRecord,
    group_split,
    load_dataset,
    load_manifest,
    preprocess,
    save_manifest,
    size_class_for,
    split_records,
    synth_dataset,
    synth_label,
)
from dtjrd.errors import ContractError, DataIOError, FormatError, ValidationError


def record(i=0, **kwargs):
    base = dict(
        object_id=f"o{i}",
        source_image_id=f"img{i}",
        image_path=f"/tmp/img{i}.png",
        bbox=(0, 0, 40, 40),
        jrd=30,
        category="person",
    )
    base.update(kwargs)
    return ObjectRecord(**base)


class TestSizeClass:
    def test_thresholds(self):
        assert size_class_for((0, 0, 31, 31)) == "small"
        assert size_class_for((0, 0, 32, 32)) == "medium"
        assert size_class_for((10, 10, 74, 74)) == "medium"
        assert size_class_for((0, 0, 96, 96)) == "large"
        assert size_class_for((5, 5, 101, 101)) == "large"

    def test_record_derives_size_class(self):
        assert record(bbox=(0, 0, 10, 10)).size_class == "small"
        assert record(bbox=(0, 0, 200, 200)).size_class == "large"

    def test_inconsistent_size_class_rejected(self):
        with pytest.raises(ValidationError, match="size_class"):
            record(bbox=(0, 0, 10, 10), size_class="large")

    def test_consistent_size_class_kept(self):
        assert record(bbox=(0, 0, 10, 10), size_class="small").size_class == "small"


class TestRecordValidation:
    def test_degenerate_bbox(self):
        with pytest.raises(ValidationError, match="extent"):
            record(bbox=(10, 10, 10, 40))

    def test_inverted_bbox(self):
        with pytest.raises(ValidationError):
            record(bbox=(40, 0, 10, 40))

    @pytest.mark.parametrize("jrd", [-1, 64, 255])
    def test_jrd_range(self, jrd):
        with pytest.raises(ValidationError, match="jrd"):
            record(jrd=jrd)

    def test_jrd_bounds_accepted(self):
        assert record(jrd=0).jrd == 0
        assert record(jrd=63).jrd == 63


class TestManifestIO:
    def test_round_trip(self, tmp_path):
        records = [record(i, jrd=20 + i) for i in range(5)]
        path = tmp_path / "m.jsonl"
        save_manifest(records, path)
        loaded = load_manifest(path)
        assert loaded == records

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "m.jsonl"
        body = json.dumps(record(0).to_json())
        path.write_text(f"\n{body}\n\n")
        assert len(load_manifest(path)) == 1

    def test_malformed_json_names_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps(record(0).to_json()) + "\n{not json\n")
        with pytest.raises(FormatError, match=r":2:"):
            load_manifest(path)

    def test_out_of_range_jrd_names_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        good = record(0).to_json()
        bad = record(1).to_json()
        bad["jrd"] = 64
        path.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
        with pytest.raises(ValidationError, match=r":2:.*jrd"):
            load_manifest(path)

    def test_missing_field_names_line(self, tmp_path):
        path = tmp_path / "m.jsonl"
        raw = record(0).to_json()
        del raw["bbox"]
        path.write_text(json.dumps(raw) + "\n")
        with pytest.raises(FormatError, match=r":1:.*bbox"):
            load_manifest(path)

    def test_duplicate_object_id_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        row = json.dumps(record(0).to_json())
        path.write_text(row + "\n" + row + "\n")
        with pytest.raises(ValidationError, match="duplicate"):
            load_manifest(path)

    def test_empty_file_gives_empty_list(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text("")
        assert load_manifest(path) == []


class TestGroupSplit:
    def test_ten_images_split_8_1_1(self):
        records = [record(i) for i in range(10)]
        assignment = group_split(records, seed=0)
        counts = Counter(assignment.values())
        assert counts == {"train": 8, "val": 1, "test": 1}

    def test_objects_share_source_image_split(self):
        records = []
        for i in range(12):
            records.append(record(i, source_image_id=f"img{i // 3}"))
        assignment = group_split(records, seed=1)
        splits = split_records(records, assignment)
        seen = {}
        for name, recs in splits.items():
            for r in recs:
                assert seen.setdefault(r.source_image_id, name) == name

    def test_every_group_assigned_exactly_once(self):
        records = [record(i, source_image_id=f"img{i % 7}") for i in range(21)]
        assignment = group_split(records, seed=2)
        assert set(assignment) == {f"img{i}" for i in range(7)}
        splits = split_records(records, assignment)
        assert sum(len(v) for v in splits.values()) == len(records)

    def test_deterministic(self):
        records = [record(i) for i in range(30)]
        assert group_split(records, seed=5) == group_split(records, seed=5)

    def test_seed_changes_assignment(self):
        records = [record(i) for i in range(30)]
        assert group_split(records, seed=0) != group_split(records, seed=1)

    def test_custom_ratios(self):
        records = [record(i) for i in range(10)]
        counts = Counter(group_split(records, ratios=(1, 1, 0), seed=3).values())
        assert counts == {"train": 5, "val": 5}

    def test_bad_inputs(self):
        with pytest.raises(ContractError):
            group_split([], seed=0)
        with pytest.raises(ContractError):
            group_split([record(0)], ratios=(1, 1), seed=0)
        with pytest.raises(ContractError):
            group_split([record(0)], ratios=(0, 0, 0), seed=0)

    def test_unassigned_image_rejected(self):
        records = [record(0), record(1)]
        assignment = group_split([records[0]], seed=0)
        with pytest.raises(ValidationError, match="img1"):
            split_records(records, assignment)


def write_png(path, array):
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)


class TestPreprocess:
    def test_constant_gray_maps_near_zero(self, tmp_path):
        path = tmp_path / "gray.png"
        write_png(path, np.full((64, 64, 3), 128))
        rec = record(0, image_path=str(path), bbox=(0, 0, 64, 64))
        out = preprocess(rec, 32)
        assert out.shape == (3, 32, 32)
        assert out.dtype == np.float32
        assert np.max(np.abs(out - (128 / 255.0 - 0.5) / 0.5)) < 1e-6

    def test_target_shape(self, tmp_path):
        path = tmp_path / "x.png"
        write_png(path, np.random.default_rng(0).integers(0, 256, size=(100, 80, 3)))
        rec = record(0, image_path=str(path), bbox=(5, 10, 75, 90))
        assert preprocess(rec, 384).shape == (3, 384, 384)

    def test_identity_resize_preserves_crop(self, tmp_path):
        rng = np.random.default_rng(1)
        pixels = rng.integers(0, 256, size=(48, 48, 3))
        path = tmp_path / "x.png"
        write_png(path, pixels)
        rec = record(0, image_path=str(path), bbox=(8, 8, 40, 40))
        out = preprocess(rec, 32)
        want = ((pixels[8:40, 8:40].astype(np.float64) / 255.0 - 0.5) / 0.5).transpose(2, 0, 1)
        assert np.max(np.abs(out - want)) < 1e-6

    def test_bbox_outside_image_rejected(self, tmp_path):
        path = tmp_path / "x.png"
        write_png(path, np.zeros((32, 32, 3)))
        rec = record(0, image_path=str(path), bbox=(0, 0, 40, 40))
        with pytest.raises(ValidationError, match="bbox"):
            preprocess(rec, 16)

    def test_missing_file_carries_object_id(self, tmp_path):
        rec = record(7, image_path=str(tmp_path / "absent.png"), bbox=(0, 0, 8, 8))
        with pytest.raises(DataIOError) as exc_info:
            preprocess(rec, 16)
        assert exc_info.value.object_id == "o7"

    def test_load_dataset_stacks(self, tmp_path):
        path = tmp_path / "x.png"
        write_png(path, np.full((64, 64, 3), 200))
        records = [
            record(i, image_path=str(path), bbox=(0, 0, 32 + i, 32 + i), jrd=25 + i)
            for i in range(3)
        ]
        ds = load_dataset(records, 32)
        assert ds.images.shape == (3, 3, 32, 32)
        assert np.array_equal(ds.jrd, [25, 26, 27])
        assert ds.object_ids == ["o0", "o1", "o2"]
        with pytest.raises(ContractError):
            load_dataset([], 32)


class TestSynthLabel:
    def test_endpoints(self):
        assert synth_label(0.0) == 20
        assert synth_label(1.0) == 50

    def test_half_up_rounding(self):
        # 20 + 30*0.05 = 21.5 -> floor(22.0) = 22
        assert synth_label(0.05) == 22

    def test_monotone(self):
        ts = np.linspace(0, 1, 101)
        labels = [synth_label(t) for t in ts]
        assert all(a <= b for a, b in zip(labels, labels[1:]))


class TestSynthDataset:
    def test_counts_and_sidecar_rule(self, tmp_path):
        records, textures = synth_dataset(12, seed=0, out_dir=tmp_path)
        assert len(records) == 12
        assert set(textures) == {r.object_id for r in records}
        for r in records:
            t = textures[r.object_id]
            assert 0.0 <= t <= 1.0
            assert r.jrd == synth_label(t)
            assert r.category == "synthetic"

    def test_scene_geometry(self, tmp_path):
        records, _ = synth_dataset(10, seed=1, out_dir=tmp_path)
        by_scene: dict[str, list] = {}
        for r in records:
            by_scene.setdefault(r.source_image_id, []).append(r.bbox)
            x1, y1, x2, y2 = r.bbox
            assert 0 <= x1 < x2 <= 192 and 0 <= y1 < y2 <= 192
            assert 24 <= x2 - x1 <= 120 and 24 <= y2 - y1 <= 120
        for boxes in by_scene.values():
            assert 1 <= len(boxes) <= 2
            for i in range(len(boxes)):
                for j in range(i + 1, len(boxes)):
                    a, b = boxes[i], boxes[j]
                    assert a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]

    def test_images_written_and_loadable(self, tmp_path):
        records, _ = synth_dataset(4, seed=2, out_dir=tmp_path)
        for r in records:
            with Image.open(r.image_path) as img:
                assert img.size == (192, 192)
        ds = load_dataset(records, 32)
        assert ds.images.shape[0] == 4

    def test_same_seed_bitwise_identical(self, tmp_path):
        rec_a, tex_a = synth_dataset(6, seed=3, out_dir=tmp_path / "a")
        rec_b, tex_b = synth_dataset(6, seed=3, out_dir=tmp_path / "b")
        assert tex_a == tex_b
        assert [r.to_json() | {"image_path": ""} for r in rec_a] == [
            r.to_json() | {"image_path": ""} for r in rec_b
        ]
        for ra, rb in zip(rec_a, rec_b):
            pa = np.asarray(Image.open(ra.image_path))
            pb = np.asarray(Image.open(rb.image_path))
            assert np.array_equal(pa, pb)

    def test_brightness_tracks_texture(self, tmp_path):
        # t near 0 renders bright (about 208), t near 1 dark (about 48)
        records, textures = synth_dataset(20, seed=4, out_dir=tmp_path)
        for r in records:
            x1, y1, x2, y2 = r.bbox
            with Image.open(r.image_path) as img:
                pixels = np.asarray(img, dtype=np.float64)
            inner = pixels[y1 + 4:y2 - 4, x1 + 4:x2 - 4, 0]
            expect = 208.0 - 160.0 * textures[r.object_id]
            assert abs(inner.mean() - expect) < 8.0

    def test_bad_n(self, tmp_path):
        with pytest.raises(ContractError):
            synth_dataset(0, seed=0, out_dir=tmp_path)

    def test_manifest_round_trip(self, tmp_path):
        records, _ = synth_dataset(5, seed=5, out_dir=tmp_path)
        path = tmp_path / "manifest.jsonl"
        save_manifest(records, path)
        assert load_manifest(path) == records
