import struct

import numpy as np
import pytest

from gelovec.data import (
    decode_checkpoint,
    encode_checkpoint,
    encode_pnm,
    gen_synthetic,
    load_checkpoint,
    load_manifest,
    perimeter,
    rasterize,
    read_image,
    read_mask,
    save_checkpoint,
    write_dataset,
    write_image,
)
from gelovec.errors import DataError, FormatError


class TestSynthetic:
    @pytest.mark.parametrize("difficulty", ["easy", "boundary", "textured"])
    def test_deterministic(self, difficulty):
        a = gen_synthetic(3, 32, difficulty, seed=4)
        b = gen_synthetic(3, 32, difficulty, seed=4)
        for ra, rb in zip(a, b):
            assert ra.image.tobytes() == rb.image.tobytes()
            assert ra.mask.tobytes() == rb.mask.tobytes()

    @pytest.mark.parametrize("difficulty", ["easy", "boundary", "textured"])
    def test_binary_masks_in_range(self, difficulty):
        for r in gen_synthetic(20, 64, difficulty, seed=1):
            assert set(np.unique(r.mask)) <= {0.0, 1.0}
            assert 0.05 <= r.mask.mean() <= 0.6
            assert r.image.shape == (1, 3, 64, 64)
            assert 0 <= r.image.min() and r.image.max() <= 1

    @pytest.mark.parametrize("difficulty", ["easy", "boundary", "textured"])
    def test_rerasterize(self, difficulty):
        for r in gen_synthetic(5, 64, difficulty, seed=2):
            assert rasterize(r.shapes, 64).astype(np.float32).tobytes() == r.mask[0, 0].tobytes()

    def test_boundary_masks_are_more_complex(self):
        # Perimeter over sqrt(area) is scale free, so masks of different size compare fairly.
        def ratio(difficulty):
            recs = gen_synthetic(100, 64, difficulty, seed=0)
            return np.mean([perimeter(r.mask[0, 0]) / np.sqrt(r.mask.sum()) for r in recs])

        assert ratio("boundary") >= 2 * ratio("easy")

    def test_samples_independent_of_count(self):
        few = gen_synthetic(2, 32, "easy", seed=9)
        many = gen_synthetic(5, 32, "easy", seed=9)
        assert few[1].image.tobytes() == many[1].image.tobytes()

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError, match="easy"):
            gen_synthetic(1, 32, "bogus")
        with pytest.raises(ValueError):
            gen_synthetic(1, 16)

    def test_perimeter_square(self):
        m = np.zeros((6, 6))
        m[1:4, 1:4] = 1
        assert perimeter(m) == 12


class TestPNM:
    def test_white_pgm_bytes(self):
        assert encode_pnm(np.ones((1, 1, 2, 2))) == b"P5 2 2 255\n" + b"\xff" * 4

    def test_round_trip(self, tmp_path):
        img = np.random.default_rng(0).random((1, 3, 5, 7)).astype(np.float32)
        write_image(tmp_path / "a.ppm", img)
        back = read_image(tmp_path / "a.ppm")
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-7

    def test_mask_threshold(self, tmp_path):
        (tmp_path / "m.pgm").write_bytes(b"P5\n# comment\n3 1\n255\n" + bytes([0, 127, 128]))
        np.testing.assert_array_equal(read_mask(tmp_path / "m.pgm").ravel(), [0, 0, 1])

    def test_truncated(self, tmp_path):
        (tmp_path / "t.ppm").write_bytes(b"P6 2 2 255\n" + b"\x00" * 11)
        with pytest.raises(FormatError, match="truncated"):
            read_image(tmp_path / "t.ppm")

    def test_overlong(self, tmp_path):
        (tmp_path / "t.ppm").write_bytes(b"P6 1 1 255\n" + b"\x00" * 4)
        with pytest.raises(FormatError):
            read_image(tmp_path / "t.ppm")

    @pytest.mark.parametrize("data", [b"P3 1 1 255\n\x00", b"P5 x 1 255\n\x00", b"P5 1 1 65535\n\x00\x00", b"P5"])
    def test_malformed_header(self, tmp_path, data):
        (tmp_path / "bad.pgm").write_bytes(data)
        with pytest.raises(FormatError, match="bad.pgm"):
            read_image(tmp_path / "bad.pgm")


class TestManifest:
    def test_empty(self, tmp_path):
        (tmp_path / "m.tsv").write_text("")
        assert load_manifest(tmp_path / "m.tsv") == []

    def test_two_lines_in_order(self, tmp_path):
        recs = gen_synthetic(2, 32, "easy", seed=0)
        manifest = write_dataset(recs, tmp_path)
        loaded = load_manifest(manifest)
        assert [r.id for r in loaded] == [r.id for r in recs]
        for a, b in zip(loaded, recs):
            np.testing.assert_array_equal(a.mask, b.mask)
            assert np.abs(a.image - b.image).max() < 1e-6

    def test_one_field(self, tmp_path):
        (tmp_path / "m.tsv").write_text("a.ppm\tb.pgm\nonly_one.ppm\n")
        with pytest.raises(DataError, match=":2:"):
            load_manifest(tmp_path / "m.tsv")

    def test_missing_file_line_number(self, tmp_path):
        (tmp_path / "m.tsv").write_text("\nnope.ppm\tnope.pgm\n")
        with pytest.raises(DataError, match="line 2"):
            load_manifest(tmp_path / "m.tsv")


class TestCheckpoint:
    def test_single_value_bytes(self):
        data = encode_checkpoint({"w": np.ones((1, 1, 1, 1), np.float32)}, step=7)
        expected = (b"GVEC\x01" + struct.pack("<I", 1) + struct.pack("<I", 1) + b"w" + b"\x04"
                    + struct.pack("<4I", 1, 1, 1, 1) + b"\x00\x00\x80\x3f" + struct.pack("<Q", 7))
        assert data == expected

    def test_round_trip_bytes(self, tmp_path):
        r = np.random.default_rng(0)
        tensors = {"a.weight": r.standard_normal((3, 2, 3, 3)).astype(np.float32),
                   "scalar": np.array([0.5], np.float32), "é": r.standard_normal((4,)).astype(np.float32)}
        save_checkpoint(tmp_path / "one", tensors, step=123)
        loaded, step = load_checkpoint(tmp_path / "one")
        assert step == 123
        for k in tensors:
            assert loaded[k].tobytes() == tensors[k].tobytes()
        save_checkpoint(tmp_path / "two", loaded, step)
        assert (tmp_path / "one").read_bytes() == (tmp_path / "two").read_bytes()

    def test_bad_magic_names_path(self, tmp_path):
        p = tmp_path / "broken.ckpt"
        p.write_bytes(b"XXXX" + encode_checkpoint({}, 0)[4:])
        with pytest.raises(FormatError, match="broken.ckpt"):
            load_checkpoint(p)

    def test_version(self):
        data = bytearray(encode_checkpoint({}, 0))
        data[4] = 2
        with pytest.raises(FormatError, match="version"):
            decode_checkpoint(bytes(data))

    def test_length_mismatch(self):
        data = encode_checkpoint({"w": np.zeros(3, np.float32)}, 0)
        with pytest.raises(FormatError, match="length"):
            decode_checkpoint(data[:-3])
        with pytest.raises(FormatError, match="length"):
            decode_checkpoint(data + b"\x00")
