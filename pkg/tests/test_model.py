"""Model plumbing: parameter registry, checkpoints, inference determinism."""

import numpy as np
import pytest

from excount.checkpoint import load_checkpoint, save_checkpoint
from excount.config import tiny_config
from excount.geometry import build_exemplar_set
from excount.model import CountingModel


def make_scene(seed=0):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(128, 128, 3))
    boxes = [(8.0, 8.0, 24.0, 26.0), (60.0, 50.0, 80.0, 72.0)]
    return img, boxes


class TestParameters:
    def test_registry_covers_encoder_and_branches(self):
        model = CountingModel(tiny_config(), seed=0)
        names = set(model.parameters())
        assert "patch_proj.weight" in names
        assert "blocks.1.mlp.fc2.bias" in names
        assert "branches.2.slack.weight" in names
        # disjoint branch ownership
        b0 = set(model.branch_parameters(0))
        b1 = set(model.branch_parameters(1))
        assert b0 & b1 == set()

    def test_zero_grad_clears(self):
        model = CountingModel(tiny_config(), seed=0)
        img, boxes = make_scene()
        es = build_exemplar_set(img, boxes, 32)
        maps, _, _ = model.forward_branches(img, es, mode="train")
        maps[0].tensor.mean().backward()
        model.zero_grad()
        assert all(p.grad is None for p in model.parameters().values())


class TestCheckpoint:
    def test_roundtrip_identical_inference(self, tmp_path):
        cfg = tiny_config()
        model = CountingModel(cfg, seed=3)
        img, boxes = make_scene(1)
        es = build_exemplar_set(img, boxes, cfg.exemplar_size)
        before = model.infer(img, es)

        path = tmp_path / "m.ckpt"
        save_checkpoint(path, cfg, model.state_arrays(), extra={"note": 1})
        cfg2, arrays, extra = load_checkpoint(path)
        assert cfg2.to_dict() == cfg.to_dict()
        assert extra == {"note": 1}
        model2 = CountingModel(cfg2, seed=999)  # different init, then overwritten
        model2.load_state_arrays(arrays)
        after = model2.infer(img, es)
        assert after.count == before.count
        np.testing.assert_array_equal(after.count_map.values, before.count_map.values)

    def test_documented_byte_layout(self, tmp_path):
        # parse the container with nothing but the documented layout
        import json
        import struct

        from excount.config import ModelConfig

        cfg = ModelConfig()
        arr = np.arange(6.0).reshape(2, 3)
        p = tmp_path / "layout.ckpt"
        save_checkpoint(p, cfg, {"w": arr}, extra={"k": 7})
        raw = p.read_bytes()
        assert raw[:8] == b"XCNT0001"
        (meta_len,) = struct.unpack("<I", raw[8:12])
        meta = json.loads(raw[12 : 12 + meta_len])
        assert meta["extra"] == {"k": 7}
        assert meta["config"]["image_size"] == 384
        off = 12 + meta_len
        (n,) = struct.unpack("<I", raw[off : off + 4])
        off += 4
        assert n == 1
        (name_len,) = struct.unpack("<H", raw[off : off + 2])
        off += 2
        assert raw[off : off + name_len] == b"w"
        off += name_len
        code, ndim = struct.unpack("<BB", raw[off : off + 2])
        off += 2
        assert (code, ndim) == (0, 2)
        dims = struct.unpack("<2I", raw[off : off + 8])
        off += 8
        assert dims == (2, 3)
        data = np.frombuffer(raw[off : off + 48], dtype="<f8").reshape(2, 3)
        np.testing.assert_array_equal(data, arr)
        assert off + 48 == len(raw)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(p)

    def test_missing_parameter_rejected(self, tmp_path):
        cfg = tiny_config()
        model = CountingModel(cfg, seed=0)
        arrays = model.state_arrays()
        arrays.pop("patch_proj.weight")
        model2 = CountingModel(cfg, seed=1)
        with pytest.raises(ValueError, match="missing"):
            model2.load_state_arrays(arrays)

    def test_shape_mismatch_rejected(self, tmp_path):
        cfg = tiny_config()
        model = CountingModel(cfg, seed=0)
        arrays = model.state_arrays()
        arrays["patch_proj.bias"] = np.zeros(7)
        with pytest.raises(ValueError, match="shape"):
            CountingModel(cfg, seed=1).load_state_arrays(arrays)


class TestInference:
    def test_deterministic(self):
        model = CountingModel(tiny_config(), seed=2)
        img, boxes = make_scene(4)
        es = build_exemplar_set(img, boxes, 32)
        a = model.infer(img, es)
        b = model.infer(img, es)
        assert a.count == b.count
        np.testing.assert_array_equal(a.count_map.values, b.count_map.values)

    def test_count_nonnegative_from_rectifier(self):
        for seed in range(3):
            model = CountingModel(tiny_config(), seed=seed)
            img, boxes = make_scene(seed + 10)
            es = build_exemplar_set(img, boxes, 32)
            res = model.infer(img, es)
            assert (res.redundant.values >= 0).all()
            assert res.count >= 0
