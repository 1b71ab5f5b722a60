import json
import struct

import numpy as np
import pytest

from dtjrd.checkpoint import MAGIC, load_checkpoint, read_header, save_checkpoint
from dtjrd.errors import FormatError
from dtjrd.model import DTJRDModel, ModelConfig, interpolate_pos_embed

TINY = ModelConfig(image_size=32, patch_size=8, dim=16, depth=2, heads=2, mlp_dim=32)


def assert_models_equal(a, b):
    pa, pb = a.named_parameters(), b.named_parameters()
    assert set(pa) == set(pb)
    for name in pa:
        assert np.array_equal(pa[name].data, pb[name].data), name
        assert pa[name].data.dtype == pb[name].data.dtype, name


class TestRoundTrip:
    def test_bitwise(self, tmp_path):
        model = DTJRDModel(TINY, seed=3)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        assert_models_equal(model, load_checkpoint(path))

    def test_header_contents(self, tmp_path):
        model = DTJRDModel(TINY, seed=0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path, extra={"note": "x"})
        header = read_header(path)
        assert header["config"] == TINY.to_dict()
        assert header["preprocess"] == {"mean": 0.5, "std": 0.5}
        assert header["extra"] == {"note": "x"}
        names = [t["name"] for t in header["tensors"]]
        assert names == [p.name for p in model.parameters()]

    def test_magic_prefix_on_disk(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(DTJRDModel(TINY), path)
        assert path.read_bytes()[: len(MAGIC)] == MAGIC

    def test_mutated_weights_survive(self, tmp_path):
        model = DTJRDModel(TINY, seed=1)
        model.param("head.b").data = np.arange(64, dtype=np.float32)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert np.array_equal(loaded.param("head.b").data, np.arange(64, dtype=np.float32))

    def test_load_respects_stored_config(self, tmp_path):
        cfg = ModelConfig(image_size=16, patch_size=8, dim=8, depth=1, heads=2, mlp_dim=16)
        path = tmp_path / "m.ckpt"
        save_checkpoint(DTJRDModel(cfg, seed=2), path)
        loaded = load_checkpoint(path)
        assert loaded.config == cfg


class TestPosEmbedResize:
    def test_grid_change_interpolates(self, tmp_path):
        small = ModelConfig(image_size=224, patch_size=32, dim=16, depth=1, heads=2, mlp_dim=16)
        big = ModelConfig(image_size=384, patch_size=32, dim=16, depth=1, heads=2, mlp_dim=16)
        assert small.num_patches == 49 and big.num_patches == 144
        model = DTJRDModel(small, seed=4)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path, config=big)
        got = loaded.param("pos_embed").data
        assert got.shape == (1 + 144, 16)
        want = interpolate_pos_embed(model.param("pos_embed").data, big.grid)
        assert np.array_equal(got, want)
        # every non-positional parameter must survive bitwise
        assert np.array_equal(loaded.param("head.w").data, model.param("head.w").data)
        assert np.array_equal(loaded.param("blocks.0.attn.qkv.w").data,
                              model.param("blocks.0.attn.qkv.w").data)

    def test_width_mismatch_rejected(self, tmp_path):
        cfg = ModelConfig(image_size=32, patch_size=8, dim=16, depth=1, heads=2, mlp_dim=16)
        path = tmp_path / "m.ckpt"
        save_checkpoint(DTJRDModel(cfg), path)

        def reshape_pos(h):
            entry = next(t for t in h["tensors"] if t["name"] == "pos_embed")
            entry["shape"] = [(1 + cfg.num_patches) * 2, cfg.dim // 2]

        _rewrite_manifest(path, reshape_pos)
        with pytest.raises(FormatError, match="pos_embed width"):
            load_checkpoint(path)


class TestCorruption:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(DTJRDModel(TINY), path)
        raw = bytearray(path.read_bytes())
        raw[:6] = b"NOTFMT"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_truncated_payload_names_parameter(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(DTJRDModel(TINY), path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError, match="truncated payload"):
            load_checkpoint(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(DTJRDModel(TINY), path)
        path.write_bytes(path.read_bytes()[:20])
        with pytest.raises(FormatError, match="truncated"):
            read_header(path)

    def test_non_finite_weights_rejected_on_save(self, tmp_path):
        model = DTJRDModel(TINY)
        bad = model.param("head.w").data.copy()
        bad[0, 0] = np.nan
        model.param("head.w").data = bad
        with pytest.raises(FormatError, match="head.w"):
            save_checkpoint(model, tmp_path / "m.ckpt")


def _rewrite_manifest(path, mutate):
    """Parse a checkpoint, apply ``mutate`` to its header dict, rewrite."""
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<Q", raw[6:14])
    header = json.loads(raw[14:14 + hlen])
    payload = raw[14 + hlen:]
    mutate(header)
    hb = json.dumps(header).encode()
    path.write_bytes(MAGIC + struct.pack("<Q", len(hb)) + hb + payload)


class TestManifestValidation:
    def test_missing_parameter_named(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(DTJRDModel(TINY), path)
        _rewrite_manifest(
            path,
            lambda h: h["tensors"].__delitem__(
                next(i for i, t in enumerate(h["tensors"]) if t["name"] == "head.b")
            ),
        )
        with pytest.raises(FormatError, match="head.b"):
            load_checkpoint(path)

    def test_duplicate_parameter_named(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(DTJRDModel(TINY), path)
        _rewrite_manifest(path, lambda h: h["tensors"].append(dict(h["tensors"][0])))
        with pytest.raises(FormatError, match="duplicate"):
            load_checkpoint(path)

    def test_unexpected_parameter_named(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(DTJRDModel(TINY), path)

        def add_stray(h):
            stray = dict(h["tensors"][0])
            stray["name"] = "stray.w"
            h["tensors"].append(stray)

        _rewrite_manifest(path, add_stray)
        with pytest.raises(FormatError, match="stray.w"):
            load_checkpoint(path)

    def test_shape_mismatch_named(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(DTJRDModel(TINY), path)

        def shrink_head(h):
            entry = next(t for t in h["tensors"] if t["name"] == "head.b")
            entry["shape"] = [32]

        _rewrite_manifest(path, shrink_head)
        with pytest.raises(FormatError, match="head.b"):
            load_checkpoint(path)
