import struct
import zlib
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectralx import dataio as D


CFG = D.SceneConfig()


class TestGenerate:
    def test_noise_free_is_signature_times_illumination(self):
        cfg = replace(CFG, noise_std=0.0, seed=4)
        img, labels = D.generate(cfg)
        sig = D.class_signatures(cfg)
        illum = D.illumination_field(cfg.size, cfg.illumination, _rng_after_labels(cfg))
        np.testing.assert_allclose(img.values, (sig[labels] * illum[..., None]).astype(np.float32), rtol=1e-6)

    def test_deterministic(self):
        a, la = D.generate(replace(CFG, seed=11))
        b, lb = D.generate(replace(CFG, seed=11))
        assert np.array_equal(a.values, b.values) and np.array_equal(la, lb)

    def test_nearest_signature_oracle(self):
        cfg = replace(CFG, noise_std=0.0, illumination=0.0)
        sig = D.class_signatures(cfg)
        for s in range(5):
            img, labels = D.generate(replace(cfg, seed=s))
            d = ((img.values[..., None, :] - sig) ** 2).sum(-1)
            assert (d.argmin(-1) == labels).mean() == 1.0

    def test_signatures_separated(self):
        sig = D.class_signatures(CFG)
        d = np.linalg.norm(sig[:, None] - sig[None], axis=-1)
        assert d[~np.eye(len(sig), dtype=bool)].min() > 3 * CFG.noise_std

    def test_shift_keeps_labels(self):
        for kind in ("regional", "seasonal"):
            _, a = D.generate(replace(CFG, seed=2))
            img, b = D.generate(replace(CFG, seed=2), D.DomainShift(kind, 0.8))
            assert np.array_equal(a, b)

    def test_shift_changes_spectra(self):
        a, _ = D.generate(replace(CFG, seed=2))
        b, _ = D.generate(replace(CFG, seed=2), D.DomainShift("seasonal", 0.5))
        assert not np.array_equal(a.values, b.values)

    def test_zero_magnitude_is_identity(self):
        gain, offset = D.gain_curve(CFG.wavelengths, D.DomainShift("seasonal", 0.0))
        assert (gain == 1).all() and (offset == 0).all()

    def test_gain_smooth(self):
        wl = np.linspace(400, 2400, 2001)
        gain, _ = D.gain_curve(wl, D.DomainShift("seasonal", 1.0))
        d1 = np.diff(gain) / np.diff(wl)
        assert np.abs(np.diff(d1)).max() < 1e-5

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            D.generate(replace(CFG, classes=1))
        with pytest.raises(ValueError):
            D.DomainShift("lunar", 1.0)

    def test_benchmark_sizes(self):
        b = D.make_benchmark(n_train=6, n_test=3)
        assert len(b.source_train) == 6 and len(b.target_test) == 3
        assert b.target_test.domain == "target"


def _rng_after_labels(cfg):
    rng = np.random.default_rng(cfg.seed)
    D.voronoi_labels(cfg.size, cfg.sites, cfg.classes, rng)
    return rng


class TestSplit:
    def test_eighty_twenty(self):
        tr, te = D.split(10, 0.8, seed=0)
        assert len(tr) == 8 and len(te) == 2

    @given(st.integers(2, 200), st.floats(0.1, 0.9), st.integers(0, 10))
    def test_disjoint_exhaustive_deterministic(self, n, frac, seed):
        try:
            tr, te = D.split(n, frac, seed)
        except ValueError:
            return
        assert set(tr).isdisjoint(te) and sorted([*tr, *te]) == list(range(n))
        tr2, te2 = D.split(n, frac, seed)
        assert np.array_equal(tr, tr2) and np.array_equal(te, te2)

    def test_empty_split(self):
        with pytest.raises(ValueError):
            D.split(3, 0.1)


def _image(rng, h=32, d=8):
    wl = tuple(float(x) for x in np.cumsum(rng.uniform(1, 50, d)) + 400)
    return D.SpectralImage(rng.normal(size=(h, h, d)).astype(np.float32), wl)


class TestRaster:
    def test_size_with_labels(self):
        img = D.SpectralImage(np.zeros((32, 32, 8), np.float32), D.SceneConfig().wavelengths)
        data = D.encode_raster(img, np.zeros((32, 32), np.int64))
        assert len(data) == 4 + 2 + 12 + 32 + 32768 + 1 + 2048 + 4 == 34871

    def test_layout(self):
        rng = np.random.default_rng(0)
        img = _image(rng, 4, 3)
        data = D.encode_raster(img)
        assert data[:4] == b"SPXR" and struct.unpack_from("<HIII", data, 4) == (1, 4, 4, 3)
        assert data[-5] == 0
        assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])

    @settings(max_examples=30)
    @given(st.integers(0, 2 ** 32 - 1), st.booleans())
    def test_round_trip(self, seed, with_labels):
        rng = np.random.default_rng(seed)
        img = _image(rng, int(rng.integers(1, 9)), int(rng.integers(1, 6)))
        h = img.values.shape[0]
        labels = rng.integers(0, 65536, size=(h, h)) if with_labels else None
        out, lab = D.decode_raster(D.encode_raster(img, labels))
        assert out.values.tobytes() == img.values.tobytes()
        assert out.wavelengths == tuple(float(np.float32(w)) for w in img.wavelengths)
        assert (lab is None) == (labels is None)
        if labels is not None:
            assert np.array_equal(lab, labels)

    def test_payload_flip_is_checksum_error(self):
        data = bytearray(D.encode_raster(_image(np.random.default_rng(1), 4, 2), np.zeros((4, 4), int)))
        data[40] ^= 0x10
        with pytest.raises(D.ChecksumError):
            D.decode_raster(bytes(data))

    def test_distinct_errors(self):
        good = D.encode_raster(_image(np.random.default_rng(2), 4, 2))
        with pytest.raises(D.BadMagicError):
            D.decode_raster(b"XPXR" + good[4:])
        with pytest.raises(D.BadVersionError):
            D.decode_raster(good[:4] + struct.pack("<H", 9) + good[6:])
        with pytest.raises(D.TruncatedError):
            D.decode_raster(good[:-10])
        assert all(issubclass(e, D.RasterError) for e in
                   (D.BadMagicError, D.BadVersionError, D.ChecksumError, D.TruncatedError))

    def test_label_range(self):
        with pytest.raises(ValueError):
            D.encode_raster(_image(np.random.default_rng(3), 2, 2), np.full((2, 2), 70000))

    def test_file_round_trip(self, tmp_path):
        img = _image(np.random.default_rng(4), 8, 4)
        D.write_raster(tmp_path / "a.spxr", img)
        out, lab = D.read_raster(tmp_path / "a.spxr")
        assert np.array_equal(out.values, img.values) and lab is None


class TestManifest:
    def test_round_trip(self, tmp_path):
        entries = [{"scene": "a/0.spxr", "domain": "source", "split": "train"}]
        D.write_manifest(tmp_path / "m.txt", entries)
        assert D.read_manifest(tmp_path / "m.txt") == entries

    def test_rejects_whitespace(self, tmp_path):
        with pytest.raises(ValueError):
            D.write_manifest(tmp_path / "m.txt", [{"scene": "a b"}])

    def test_save_and_load_split(self, tmp_path):
        ds = D.make_dataset(CFG, 3, seed=1)
        D.write_manifest(tmp_path / "manifest.txt", D.save_dataset(tmp_path, "src", ds, "train"))
        back = D.load_split(tmp_path, "train", "source")
        assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
        with pytest.raises(ValueError):
            D.load_split(tmp_path, "test")
