import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ludvision import raster
from ludvision.errors import BoundsError, FormatError, RangeError
from ludvision.raster import DEFAULT_BANDS, BandMeta, LabelMask, MultispectralImage, Rect


def random_image(rng, w=8, h=6, bands=DEFAULT_BANDS):
    return MultispectralImage(bands, rng.random((len(bands), h, w)).astype(np.float32))


def test_default_band_set():
    got = [(b.name, b.center_nm, b.fwhm_nm) for b in DEFAULT_BANDS]
    assert got == [("B", 450, 16), ("G", 560, 16), ("R", 650, 16), ("RE", 730, 16), ("NIR", 840, 26)]


def test_round_trip(tmp_path):
    img = random_image(np.random.default_rng(0))
    raster.write_raster(img, tmp_path / "a.lms")
    back = raster.read_raster(tmp_path / "a.lms")
    assert back == img
    assert back.bands == DEFAULT_BANDS


def test_hand_assembled_file(tmp_path):
    blob = bytes.fromhex(
        "4c554456"          # LUDV
        "0100"              # version 1
        "02000000"          # width 2
        "02000000"          # height 2
        "0100"              # one band
        "00000c44"          # 560.0
        "00008041"          # 16.0
        "47000000"          # "G"
        "00000000" "0000803e" "0000003f" "0000803f"  # 0, 0.25, 0.5, 1.0
    )
    path = tmp_path / "hand.lms"
    path.write_bytes(blob)
    img = raster.read_raster(path)
    assert img.bands == (BandMeta("G", 560.0, 16.0),)
    assert img.data.tolist() == [[[0.0, 0.25], [0.5, 1.0]]]
    assert raster.encode_raster(img) == blob


def test_bad_magic(tmp_path):
    img = random_image(np.random.default_rng(1))
    blob = bytearray(raster.encode_raster(img))
    blob[:4] = b"TIFF"
    (tmp_path / "x.lms").write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        raster.read_raster(tmp_path / "x.lms")


@pytest.mark.parametrize("mutate", [
    lambda b: b[:-1],
    lambda b: b + b"\0",
    lambda b: b[:10],
    lambda b: b[:4] + b"\x02\x00" + b[6:],
])
def test_malformed(mutate):
    blob = raster.encode_raster(random_image(np.random.default_rng(2)))
    with pytest.raises(FormatError):
        raster.decode_raster(mutate(blob))


def test_out_of_range_payload_rejected():
    img = random_image(np.random.default_rng(3), bands=DEFAULT_BANDS[:1])
    blob = bytearray(raster.encode_raster(img))
    blob[-4:] = np.float32(1.5).tobytes()
    with pytest.raises(RangeError):
        raster.decode_raster(bytes(blob))
    blob[-4:] = np.float32(np.nan).tobytes()
    with pytest.raises(RangeError):
        raster.decode_raster(bytes(blob))


def test_writes_are_deterministic(tmp_path):
    img = random_image(np.random.default_rng(4))
    raster.write_raster(img, tmp_path / "a.lms")
    raster.write_raster(img, tmp_path / "b.lms")
    assert (tmp_path / "a.lms").read_bytes() == (tmp_path / "b.lms").read_bytes()


def test_full_frame_file_size(tmp_path):
    img = MultispectralImage(DEFAULT_BANDS, np.zeros((5, 1100, 1400), np.float32))
    raster.write_raster(img, tmp_path / "big.lms")
    assert raster.header_size(5) == 76
    assert (tmp_path / "big.lms").stat().st_size == 76 + 5 * 1400 * 1100 * 4


def test_range_error_writes_nothing(tmp_path):
    img = random_image(np.random.default_rng(5))
    bad = object.__new__(MultispectralImage)
    bad.bands = img.bands
    bad.data = img.data * 2
    with pytest.raises(RangeError):
        raster.write_raster(bad, tmp_path / "bad.lms")
    assert not (tmp_path / "bad.lms").exists()
    with pytest.raises(RangeError):
        MultispectralImage(img.bands, img.data * 2)


def test_from_counts():
    img = raster.from_counts(np.array([[0, 65535], [32768, 1]], np.uint16), DEFAULT_BANDS[:1])
    assert img.data[0, 0, 1] == 1.0
    assert img.data[0, 1, 0] == np.float32(32768 / 65535)


class TestCrop:
    def test_identity(self):
        img = random_image(np.random.default_rng(6))
        assert raster.crop(img, Rect(0, 0, img.width, img.height)) == img

    def test_centered_trim(self):
        img = MultispectralImage(DEFAULT_BANDS[:1], np.zeros((1, 1300, 1600), np.float32))
        rect = Rect.centered(1600, 1300, 1400, 1100)
        assert rect == Rect(100, 100, 1400, 1100)
        out = raster.crop(img, rect)
        assert (out.width, out.height) == (1400, 1100)

    def test_pixels_and_bands_preserved(self):
        img = random_image(np.random.default_rng(7), 10, 9)
        out = raster.crop(img, Rect(2, 3, 5, 4))
        assert np.array_equal(out.data, img.data[:, 3:7, 2:7])
        assert out.bands == img.bands

    def test_bounds(self):
        img = random_image(np.random.default_rng(8))
        with pytest.raises(BoundsError):
            raster.crop(img, Rect(5, 0, 4, 2))
        with pytest.raises(BoundsError):
            Rect(-1, 0, 2, 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_round_trip_property(nb, w, h, seed):
    img = random_image(np.random.default_rng(seed), w, h, DEFAULT_BANDS[:nb])
    assert raster.decode_raster(raster.encode_raster(img)) == img


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_crop_composition(data):
    w, h = data.draw(st.integers(2, 15)), data.draw(st.integers(2, 15))
    img = random_image(np.random.default_rng(0), w, h, DEFAULT_BANDS[:2])
    ax, ay = data.draw(st.integers(0, w - 1)), data.draw(st.integers(0, h - 1))
    aw, ah = data.draw(st.integers(1, w - ax)), data.draw(st.integers(1, h - ay))
    bx, by = data.draw(st.integers(0, aw - 1)), data.draw(st.integers(0, ah - 1))
    bw, bh = data.draw(st.integers(1, aw - bx)), data.draw(st.integers(1, ah - by))
    twice = raster.crop(raster.crop(img, Rect(ax, ay, aw, ah)), Rect(bx, by, bw, bh))
    assert twice == raster.crop(img, Rect(ax + bx, ay + by, bw, bh))


class TestMasks:
    def test_pgm_round_trip(self, tmp_path):
        data = np.random.default_rng(9).choice([0, 1, 255], size=(5, 7)).astype(np.uint8)
        raster.write_mask(LabelMask(data), tmp_path / "m.pgm")
        blob = (tmp_path / "m.pgm").read_bytes()
        assert blob.startswith(b"P5\n7 5\n255\n")
        assert raster.read_mask(tmp_path / "m.pgm") == LabelMask(data)

    def test_pgm_with_comment(self):
        blob = b"P5\n# made by hand\n2 1\n255\n\x00\x01"
        assert raster.decode_pgm(blob).data.tolist() == [[0, 1]]

    def test_invalid_codes(self):
        with pytest.raises(ValueError):
            LabelMask(np.array([[0, 2]]))

    def test_bad_pgm(self):
        with pytest.raises(FormatError):
            raster.decode_pgm(b"P2\n1 1\n255\n0")
        with pytest.raises(FormatError):
            raster.decode_pgm(b"P5\n2 2\n255\n\x00")
