import numpy as np
import pytest

from pointtryon.tensorio import (
    CheckpointError,
    image_to_u8,
    load_checkpoint,
    load_image_png,
    load_tensor,
    save_checkpoint,
    save_image_png,
    save_tensor,
    u8_to_image,
)


@pytest.fixture
def entries():
    rng = np.random.default_rng(0)
    return {
        "weight": rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
        "bias": rng.normal(size=(4,)).astype(np.float32),
        "scalarish": np.array(3.5, dtype=np.float32),
    }


class TestCheckpoint:
    def test_round_trip_byte_identical(self, tmp_path, entries):
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(p1, entries)
        loaded = load_checkpoint(p1)
        assert list(loaded) == list(entries)
        for k in entries:
            assert np.array_equal(loaded[k], entries[k])
        save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path, entries):
        p = tmp_path / "a.ckpt"
        save_checkpoint(p, entries)
        raw = bytearray(p.read_bytes())
        raw[:4] = b"NOPE"
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_bad_version_rejected(self, tmp_path, entries):
        p = tmp_path / "a.ckpt"
        save_checkpoint(p, entries)
        raw = bytearray(p.read_bytes())
        raw[4] = 99
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_truncated_payload_rejected(self, tmp_path, entries):
        p = tmp_path / "a.ckpt"
        save_checkpoint(p, entries)
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_trailing_garbage_rejected(self, tmp_path, entries):
        p = tmp_path / "a.ckpt"
        save_checkpoint(p, entries)
        p.write_bytes(p.read_bytes() + b"xx")
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_strict_load_rejects_unknown_names(self, tmp_path, entries):
        p = tmp_path / "a.ckpt"
        save_checkpoint(p, entries)
        loaded = load_checkpoint(p, expected_names=set(entries))
        assert set(loaded) == set(entries)
        with pytest.raises(CheckpointError):
            load_checkpoint(p, expected_names={"weight"})

    def test_float64_cast_to_f32(self, tmp_path):
        p = tmp_path / "a.ckpt"
        save_checkpoint(p, {"x": np.array([1.0, 2.0], dtype=np.float64)})
        assert load_checkpoint(p)["x"].dtype == np.float32

    def test_single_tensor_helpers(self, tmp_path):
        p = tmp_path / "one.bin"
        arr = np.arange(12, dtype=np.float32).reshape(3, 4)
        save_tensor(p, "flow", arr)
        name, back = load_tensor(p)
        assert name == "flow"
        assert np.array_equal(back, arr)


class TestPngMapping:
    def test_u8_round_trip_on_grid_values(self):
        # values exactly on the quantization grid survive the round trip
        u8 = np.arange(256, dtype=np.uint8)
        assert np.array_equal(image_to_u8(u8_to_image(u8)), u8)

    def test_quantization_error_bound(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(-1, 1, (3, 8, 8))
        back = u8_to_image(image_to_u8(img))
        assert np.abs(back - img).max() <= 0.5 / 127.5 + 1e-6

    def test_png_round_trip_rgb_and_gray(self, tmp_path):
        rng = np.random.default_rng(1)
        rgb = rng.uniform(-1, 1, (3, 10, 12))
        save_image_png(tmp_path / "rgb.png", rgb)
        back = load_image_png(tmp_path / "rgb.png")
        assert back.shape == (3, 10, 12)
        assert np.abs(back - rgb).max() <= 0.5 / 127.5 + 1e-6
        gray = rng.uniform(-1, 1, (1, 6, 5))
        save_image_png(tmp_path / "g.png", gray)
        assert load_image_png(tmp_path / "g.png").shape == (1, 6, 5)
