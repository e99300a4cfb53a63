import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from songdisc.data import (AudioClip, MelSpectrogram, apportion,
                           filter_by_length, frame_count, load_and_resample,
                           load_spectrograms, mel_filterbank, mel_transform,
                           minmax_normalize, save_spectrograms,
                           split_by_individual)
from songdisc.errors import FormatError, InputError, ValidationError


def spec_of(t, song_id="s", individual="i", song_type=""):
    rng = np.random.default_rng(abs(hash(song_id)) % 2 ** 32)
    return MelSpectrogram(rng.uniform(size=(80, t)), song_id, individual, song_type)


class TestLoadAndResample:
    def test_halves_44100_stereo(self, tmp_path):
        path = tmp_path / "a.wav"
        rng = np.random.default_rng(0)
        data = (rng.uniform(-0.3, 0.3, (88200, 2)) * 32767).astype(np.int16)
        wavfile.write(path, 44100, data)
        clip = load_and_resample(path)
        assert clip.sample_rate == 22050
        assert clip.samples.shape == (44100,)
        assert clip.samples.ndim == 1

    def test_native_rate_unchanged(self, tmp_path):
        path = tmp_path / "b.wav"
        data = np.random.default_rng(1).uniform(-0.5, 0.5, 5000).astype(np.float32)
        wavfile.write(path, 22050, data)
        clip = load_and_resample(path)
        assert np.array_equal(clip.samples, data.astype(np.float64))

    def test_int16_scaling(self, tmp_path):
        path = tmp_path / "c.wav"
        wavfile.write(path, 22050, np.array([16384, -16384], dtype=np.int16))
        clip = load_and_resample(path)
        assert np.allclose(clip.samples, [0.5, -0.5])

    def test_empty_audio_rejected(self, tmp_path):
        path = tmp_path / "d.wav"
        wavfile.write(path, 22050, np.zeros(0, dtype=np.int16))
        with pytest.raises(ValidationError):
            load_and_resample(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(InputError):
            load_and_resample(tmp_path / "nope.wav")

    def test_garbage_file_rejected(self, tmp_path):
        path = tmp_path / "e.wav"
        path.write_bytes(b"this is not audio")
        with pytest.raises(InputError):
            load_and_resample(path)


class TestMelTransform:
    def test_three_seconds_gives_255_frames(self):
        clip = AudioClip(np.random.default_rng(2).uniform(-1, 1, 66150), 22050, "x")
        assert mel_transform(clip).n_frames == 255

    def test_single_window(self):
        clip = AudioClip(np.random.default_rng(3).uniform(-1, 1, 1024), 22050, "x")
        assert mel_transform(clip).n_frames == 1

    def test_too_short_rejected(self):
        with pytest.raises(ValidationError):
            mel_transform(AudioClip(np.zeros(1023), 22050, "x"))

    def test_silence_maps_to_zeros(self):
        clip = AudioClip(np.zeros(4096), 22050, "x")
        assert np.all(mel_transform(clip).values == 0.0)

    def test_values_in_unit_interval(self):
        clip = AudioClip(np.random.default_rng(4).uniform(-1, 1, 30000), 22050, "x")
        v = mel_transform(clip).values
        assert v.shape[0] == 80
        assert v.min() >= 0.0 and v.max() <= 1.0

    def test_pure_tone_lands_in_matching_band(self):
        t = np.arange(44100) / 22050
        clip = AudioClip(np.sin(2 * np.pi * 5000 * t), 22050, "x")
        spec = mel_transform(clip)
        centers = np.fft.rfftfreq(1024, d=1 / 22050)
        fb = mel_filterbank()
        band_centers = centers[np.argmax(fb, axis=1)]
        hot = int(np.argmax(spec.values.mean(axis=1)))
        assert abs(band_centers[hot] - 5000) < 300

    @given(st.integers(1024, 200000))
    @settings(max_examples=50, deadline=None)
    def test_frame_count_formula(self, n):
        assert frame_count(n) == (n - 1024) // 256 + 1


class TestFilterbank:
    def test_shape_and_range(self):
        fb = mel_filterbank()
        assert fb.shape == (80, 513)
        assert fb.min() >= 0.0
        assert np.all(fb.max(axis=1) <= 1.0 + 1e-12)
        assert np.all(fb.max(axis=1) > 0.0)

    def test_band_limits(self):
        fb = mel_filterbank()
        freqs = np.fft.rfftfreq(1024, d=1 / 22050)
        covered = fb.sum(axis=0) > 0
        assert not covered[freqs < 1400].any()
        assert not covered[freqs > 10100].any()
        assert covered[(freqs > 2000) & (freqs < 9000)].all()


class TestMinmaxNormalize:
    def test_maps_to_unit_interval(self):
        v = minmax_normalize(np.array([[2.0, 4.0], [6.0, 10.0]]))
        assert np.array_equal(v, [[0.0, 0.25], [0.5, 1.0]])

    def test_degenerate_range_maps_to_zeros(self):
        assert np.all(minmax_normalize(np.full((3, 4), 7.7)) == 0.0)

    @given(st.integers(0, 10 ** 6))
    @settings(max_examples=30, deadline=None)
    def test_idempotent(self, seed):
        v = minmax_normalize(np.random.default_rng(seed).uniform(-5, 5, (4, 6)))
        assert np.array_equal(minmax_normalize(v), v)


class TestFilterByLength:
    def test_boundary_inclusion(self):
        specs = [spec_of(50), spec_of(100), spec_of(400), spec_of(401)]
        assert [s.n_frames for s in filter_by_length(specs)] == [100, 400]

    def test_empty(self):
        assert filter_by_length([]) == []

    def test_identity_when_all_in_range(self):
        specs = [spec_of(150), spec_of(300)]
        assert filter_by_length(specs) == specs


class TestApportion:
    def test_exact_fractions(self):
        assert apportion(10, (0.7, 0.1, 0.2)) == [7, 1, 2]

    def test_corpus_scale_counts_near_reference(self):
        counts = apportion(350, (0.7, 0.1, 0.2))
        assert sum(counts) == 350
        for got, ref in zip(counts, (244, 35, 71)):
            assert abs(got - ref) <= 1

    def test_bad_fractions_rejected(self):
        with pytest.raises(ValidationError):
            apportion(10, (0.5, 0.1, 0.2))

    @given(st.integers(3, 500))
    @settings(max_examples=50, deadline=None)
    def test_sums_and_bounds(self, n):
        fr = (0.7, 0.1, 0.2)
        counts = apportion(n, fr)
        assert sum(counts) == n
        for c, f in zip(counts, fr):
            assert int(f * n) <= c <= int(f * n) + 1


class TestSplitByIndividual:
    def make_corpus(self, n_individuals, per=3):
        return [spec_of(120, f"s{i}-{j}", f"ind{i:03d}")
                for i in range(n_individuals) for j in range(per)]

    def test_counts(self):
        split = split_by_individual(self.make_corpus(10), seed=5)
        tr, va, te = split.individuals()
        assert (len(tr), len(va), len(te)) == (7, 1, 2)
        assert len(split.train) == 21

    def test_deterministic(self):
        corpus = self.make_corpus(12)
        a = split_by_individual(corpus, seed=9)
        b = split_by_individual(corpus, seed=9)
        assert a.individuals() == b.individuals()
        assert [s.song_id for s in a.test] == [s.song_id for s in b.test]

    def test_seed_changes_assignment(self):
        corpus = self.make_corpus(20)
        a = split_by_individual(corpus, seed=1)
        b = split_by_individual(corpus, seed=2)
        assert a.individuals() != b.individuals()

    @given(st.integers(0, 10 ** 6), st.integers(3, 40))
    @settings(max_examples=40, deadline=None)
    def test_disjoint_by_individual(self, seed, n):
        split = split_by_individual(self.make_corpus(n), seed=seed)
        tr, va, te = (set(g) for g in split.individuals())
        assert not (tr & va or tr & te or va & te)
        assert len(tr | va | te) == n

    def test_too_few_individuals_rejected(self):
        with pytest.raises(ValidationError):
            split_by_individual(self.make_corpus(2), seed=0)

    def test_order_preserved_within_split(self):
        corpus = self.make_corpus(8)
        split = split_by_individual(corpus, seed=3)
        ids = [s.song_id for s in corpus]
        for part in (split.train, split.val, split.test):
            pos = [ids.index(s.song_id) for s in part]
            assert pos == sorted(pos)


class TestContainer:
    def corpus(self):
        return [spec_of(120, "a", "i1", "t1"), spec_of(101, "b", "i2", "t2"),
                spec_of(400, "c", "i1", "t1")]

    def test_round_trip(self, tmp_path):
        path = tmp_path / "corpus.spec"
        specs = self.corpus()
        save_spectrograms(path, specs)
        loaded = load_spectrograms(path)
        assert len(loaded) == 3
        for orig, got in zip(specs, loaded):
            assert got.song_id == orig.song_id
            assert got.individual_id == orig.individual_id
            assert got.song_type == orig.song_type
            assert np.array_equal(got.values,
                                  orig.values.astype(np.float32).astype(np.float64))

    def test_empty_round_trip(self, tmp_path):
        path = tmp_path / "empty.spec"
        save_spectrograms(path, [])
        assert load_spectrograms(path) == []

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "corpus.spec"
        save_spectrograms(path, self.corpus())
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(FormatError):
            load_spectrograms(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "corpus.spec"
        save_spectrograms(path, self.corpus())
        path.write_bytes(path.read_bytes() + b"\x00" * 8)
        with pytest.raises(FormatError):
            load_spectrograms(path)

    def test_corrupt_header_rejected(self, tmp_path):
        path = tmp_path / "corpus.spec"
        path.write_bytes(b"{broken\n")
        with pytest.raises(FormatError):
            load_spectrograms(path)

    def test_count_mismatch_rejected(self, tmp_path):
        path = tmp_path / "corpus.spec"
        save_spectrograms(path, self.corpus())
        line, blob = path.read_bytes().split(b"\n", 1)
        import json
        header = json.loads(line)
        header["count"] = 99
        path.write_bytes(json.dumps(header).encode() + b"\n" + blob)
        with pytest.raises(FormatError):
            load_spectrograms(path)
