import math

import numpy as np
import pytest
from scipy.io import wavfile

from zsltag.catalog import Catalog
from zsltag.errors import DataError
from zsltag.features import (
    FeatureDir,
    MelSpectrogram,
    Standardizer,
    chunk_track,
    extract_catalog_features,
    extract_mel,
    fit_standardizer,
    mel_filterbank,
    read_features,
    read_wav,
    sample_chunk,
    save_feature_dir,
    write_features,
)

SR = 22050


def slaney_peak_frequencies(n_mels=128, fmax=SR / 2):
    """Filter peaks written out from the Slaney/Auditory Toolbox definition."""
    def to_mel(f):
        return f / (200 / 3) if f < 1000 else 15 + math.log(f / 1000) * 27 / math.log(6.4)

    def to_hz(m):
        return m * 200 / 3 if m < 15 else 1000 * math.exp((m - 15) * math.log(6.4) / 27)

    top = to_mel(fmax)
    return [to_hz(top * (k + 1) / (n_mels + 1)) for k in range(n_mels)]


class TestExtract:
    def test_three_seconds_is_130_frames(self):
        mel = extract_mel(np.zeros(66150), SR)
        assert mel.frames.shape == (130, 128)

    @pytest.mark.parametrize("n", [1, 511, 512, 1000, 22050])
    def test_frame_count_formula(self, n):
        assert extract_mel(np.ones(n) * 0.1, SR).n_frames == 1 + n // 512

    def test_silence(self):
        f = extract_mel(np.zeros(22050), SR).frames
        assert np.all(f == f[0])
        assert np.abs(f).max() < 1e-12

    def test_tone_peak_bin(self):
        t = np.arange(3 * SR) / SR
        f = extract_mel(0.5 * np.sin(2 * np.pi * 440.0 * t), SR).frames
        peaks = slaney_peak_frequencies()
        expected = min(range(128), key=lambda k: abs(peaks[k] - 440.0))
        assert np.all(f[2:-2].argmax(axis=1) == expected)

    def test_filterbank_peaks_match_independent_formula(self):
        fb = mel_filterbank(n_fft=2**16)
        freqs = np.linspace(0, SR / 2, 2**15 + 1)
        peaks = freqs[fb.argmax(axis=1)]
        np.testing.assert_allclose(peaks, slaney_peak_frequencies(), atol=SR / 2**16)

    def test_deterministic(self, rng):
        x = rng.normal(size=10000)
        assert extract_mel(x, SR).frames.tobytes() == extract_mel(x, SR).frames.tobytes()

    def test_linear_before_compression(self, rng):
        x = rng.normal(size=8000)
        a = extract_mel(x, SR, compress=False).frames
        b = extract_mel(2 * x, SR, compress=False).frames
        np.testing.assert_allclose(b, 2 * a, rtol=1e-12, atol=1e-12)

    def test_rejects_rate(self):
        with pytest.raises(DataError, match="44100"):
            extract_mel(np.zeros(100), 44100)

    def test_rejects_stereo(self):
        with pytest.raises(DataError, match="mono"):
            extract_mel(np.zeros((100, 2)), SR)

    def test_finite(self, rng):
        assert np.isfinite(extract_mel(rng.normal(size=5000), SR).frames).all()


class TestStandardizer:
    def test_hand_arithmetic(self):
        s = fit_standardizer([np.array([[0.0, 2.0]]), np.array([[2.0, 4.0]])])
        np.testing.assert_allclose(s.mean, [1, 3])
        np.testing.assert_allclose(s.std, [1, 1])
        assert s.fitted_on == 2

    def test_constant_bin(self):
        x = np.column_stack([np.arange(5.0), np.full(5, 3.7)])
        s = fit_standardizer([x])
        z = s.apply(x)
        assert np.all(z[:, 1] == 0)
        assert s.std[1] == pytest.approx(1e-8)

    def test_two_pass_oracle(self, rng):
        mats = [rng.normal(3, 2, size=(int(rng.integers(1, 40)), 6)) for _ in range(12)]
        s = fit_standardizer(iter(mats))
        allf = np.concatenate(mats)
        mean = allf.sum(axis=0) / len(allf)
        var = ((allf - mean) ** 2).sum(axis=0) / len(allf)
        np.testing.assert_allclose(s.mean, mean, rtol=1e-12)
        np.testing.assert_allclose(s.std, np.sqrt(var), rtol=1e-12)

    def test_round_trip(self, rng):
        x = rng.normal(size=(50, 8)) * 5 + 2
        s = fit_standardizer([x, x[:10]])
        np.testing.assert_allclose(s.invert(s.apply(x)), x, atol=1e-5)
        assert Standardizer.from_json(s.to_json()).mean.tolist() == s.mean.tolist()

    def test_accepts_mel_objects(self, rng):
        m = MelSpectrogram(rng.normal(size=(4, 128)))
        assert fit_standardizer([m]).mean.shape == (128,)

    def test_empty(self):
        with pytest.raises(DataError):
            fit_standardizer([])


class TestChunks:
    def test_exact_length(self, rng):
        x = rng.normal(size=(130, 4))
        np.testing.assert_array_equal(sample_chunk(x, 130, 0), x)

    def test_random_window_in_bounds(self, rng):
        x = np.arange(260)[:, None] * np.ones((1, 3))
        c = sample_chunk(x, 130, 42)
        assert c.shape == (130, 3)
        start = int(c[0, 0])
        assert 0 <= start <= 130
        np.testing.assert_array_equal(c, x[start:start + 130])
        np.testing.assert_array_equal(sample_chunk(x, 130, 42), c)

    def test_tiled(self):
        x = np.arange(65)[:, None].astype(float)
        c = sample_chunk(x, 130, 0)
        np.testing.assert_array_equal(c[:65], x)
        np.testing.assert_array_equal(c[65:], x)

    @pytest.mark.parametrize("t,n", [(390, 3), (400, 4), (50, 1), (130, 1), (1, 1)])
    def test_chunk_count(self, t, n):
        chunks = chunk_track(np.zeros((t, 2)), 130)
        assert len(chunks) == n
        assert all(c.shape == (130, 2) for c in chunks)

    def test_last_chunk_tiled(self):
        x = np.arange(400)[:, None].astype(float)
        last = chunk_track(x, 130)[-1]
        np.testing.assert_array_equal(last[:10, 0], np.arange(390, 400))
        np.testing.assert_array_equal(last[10:20, 0], np.arange(390, 400))

    def test_coverage(self, rng):
        x = rng.normal(size=(777, 5))
        chunks = chunk_track(x, 130)
        full = np.concatenate(chunks[:-1])
        np.testing.assert_array_equal(full, x[: len(full)])
        np.testing.assert_array_equal(chunks[-1][: 777 - len(full)], x[len(full):])


class TestFiles:
    def test_zstf_round_trip(self, tmp_path, rng):
        x = rng.normal(size=(7, 5))
        write_features(tmp_path / "a.zstf", x, {"compression": "log1p"})
        y, params = read_features(tmp_path / "a.zstf")
        np.testing.assert_array_equal(y, x.astype(np.float32))
        assert params == {"compression": "log1p"}
        raw = (tmp_path / "a.zstf").read_bytes()
        assert raw[:4] == b"ZSTF" and raw[4] == 1
        assert int.from_bytes(raw[5:9], "little") == 7 and int.from_bytes(raw[9:13], "little") == 5

    def test_bad_magic(self, tmp_path):
        (tmp_path / "a.zstf").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(DataError):
            read_features(tmp_path / "a.zstf")

    def test_feature_dir(self, tmp_path, rng):
        feats = {"a/b": rng.normal(size=(3, 2)), "c": rng.normal(size=(4, 2))}
        save_feature_dir(tmp_path / "f", feats)
        d = FeatureDir(tmp_path / "f")
        assert sorted(d) == ["a/b", "c"] and len(d) == 2
        np.testing.assert_allclose(d["a/b"], feats["a/b"], rtol=1e-6)
        assert "zzz" not in d

    def test_wav_pipeline(self, tmp_path):
        t = np.arange(SR) / SR
        wavfile.write(tmp_path / "x.wav", SR, (0.3 * np.sin(2 * np.pi * 1000 * t) * 32767).astype(np.int16))
        wavfile.write(tmp_path / "st.wav", SR, np.zeros((100, 2), np.int16))
        x, sr = read_wav(tmp_path / "x.wav")
        assert sr == SR and abs(x.max() - 0.3) < 1e-3
        with pytest.raises(DataError, match="mono"):
            read_wav(tmp_path / "st.wav")
        cat = Catalog.from_records([("t1", ["a"], "x.wav"), ("t2", ["a"], None)])
        assert extract_catalog_features(cat, tmp_path, tmp_path / "out") == 1
        frames, params = read_features(tmp_path / "out" / "t1.zstf")
        assert frames.shape == (1 + SR // 512, 128) and params["compression"] == "log1p"
