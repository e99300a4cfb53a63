"""Embedding extraction, unit selection, and probe tests."""

import numpy as np
import pytest

from songdisc import analysis
from songdisc.data import MelSpectrogram
from songdisc.errors import ValidationError
from songdisc.model import ModelHyper, build_model

HYPER = ModelHyper(n_mels=12, width=6, d_g=4, d_l=4, heads=1)


def _perturb(model, scale=0.05, seed=9):
    """Posterior heads start at the prior (zero init); nudge every parameter
    so probes see nonzero latents."""
    rng = np.random.default_rng(seed)
    for _, p in model.named_params():
        p.value += rng.normal(0.0, scale, p.value.shape)
    return model


@pytest.fixture(scope="module")
def model():
    return _perturb(build_model(HYPER, seed=0))


@pytest.fixture(scope="module")
def vanilla_model():
    return _perturb(build_model(ModelHyper(n_mels=12, width=6, d_g=4, d_l=4,
                                           heads=1, variant="vanilla"),
                                seed=0))


def make_songs(n=5, n_mels=12, seed=0):
    rng = np.random.default_rng(seed)
    songs = []
    for i in range(n):
        t = int(rng.integers(40, 70))
        values = rng.random((n_mels, t))
        songs.append(MelSpectrogram(values=values, song_id=f"s{i}",
                                    individual_id=f"bird{i % 2}",
                                    song_type=f"type{i % 3}"))
    return songs


class TestExtraction:
    def test_one_record_per_song_in_order(self, model):
        songs = make_songs()
        records = analysis.extract_embeddings(model, songs)
        assert [r.song_id for r in records] == [s.song_id for s in songs]
        assert all(r.vector.shape == (HYPER.d_l,) for r in records)
        assert all(r.song_type == s.song_type
                   for r, s in zip(records, songs))

    def test_deterministic(self, model):
        songs = make_songs()
        a = analysis.extract_embeddings(model, songs)
        b = analysis.extract_embeddings(model, songs)
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.vector, rb.vector)

    def test_batching_matches_single_song(self, model):
        songs = make_songs(6)
        batched = analysis.extract_embeddings(model, songs)
        for i, song in enumerate(songs):
            alone = analysis.extract_embeddings(model, [song])
            np.testing.assert_allclose(alone[0].vector, batched[i].vector,
                                       atol=1e-12)

    def test_shuffle_changes_input_view(self, model):
        rng = np.random.default_rng(4)
        songs = [MelSpectrogram(values=rng.random((12, 150)),
                                song_id=f"long{i}") for i in range(4)]
        plain = analysis.extract_embeddings(model, songs)
        shuffled = analysis.extract_embeddings(model, songs, shuffle=True,
                                               seed=1)
        deltas = [np.abs(p.vector - s.vector).max()
                  for p, s in zip(plain, shuffled)]
        assert max(deltas) > 0

    def test_vanilla_model_supported(self, vanilla_model):
        songs = make_songs(3)
        records = analysis.extract_embeddings(vanilla_model, songs)
        assert len(records) == 3
        assert records[0].vector.shape == (HYPER.d_l,)

    def test_empty_input_rejected(self, model):
        with pytest.raises(ValidationError):
            analysis.extract_embeddings(model, [])

    def test_save_load_roundtrip_exact(self, model, tmp_path):
        songs = make_songs()
        records = analysis.extract_embeddings(model, songs)
        path = tmp_path / "emb.jsonl"
        analysis.save_embeddings(records, path)
        loaded = analysis.load_embeddings(path)
        assert len(loaded) == len(records)
        for a, b in zip(records, loaded):
            assert a.song_id == b.song_id
            assert a.song_type == b.song_type
            np.testing.assert_array_equal(a.vector, b.vector)


class TestUnitSelection:
    def test_largest_gap_clear_edge(self):
        sel = analysis.select_informative_units([5.0, 0.01, 4.0, 0.02])
        assert sel == [0, 2]

    def test_largest_gap_falls_back_without_edge(self):
        kl = [2.0, 1.9, 1.8, 1.7]
        with pytest.warns(UserWarning, match="no clear KL gap"):
            sel = analysis.select_informative_units(kl)
        assert sel == [0, 1, 2, 3]

    def test_threshold_method(self):
        sel = analysis.select_informative_units([0.5, 2.0, 0.9, 1.2],
                                                method="threshold",
                                                threshold=1.0)
        assert sel == [1, 3]

    def test_all_zero_selects_none(self):
        with pytest.warns(UserWarning, match="zero KL"):
            assert analysis.select_informative_units([0.0, 0.0]) == []

    def test_single_unit(self):
        assert analysis.select_informative_units([3.0]) == [0]

    def test_bad_inputs_rejected(self):
        with pytest.raises(ValidationError):
            analysis.select_informative_units([])
        with pytest.raises(ValidationError):
            analysis.select_informative_units([np.nan, 1.0])
        with pytest.raises(ValidationError):
            analysis.select_informative_units([1.0], method="mystery")


class TestUnitReport:
    def test_shapes_and_nonnegative_kl(self, model, recwarn):
        songs = make_songs()
        report = analysis.unit_informativeness(model, songs)
        assert report.mean_kl.shape == (HYPER.d_l,)
        assert report.mean_mu.shape == (HYPER.d_l,)
        assert report.mean_var.shape == (HYPER.d_l,)
        assert np.all(report.mean_kl >= 0)

    def test_report_roundtrip(self, model, tmp_path, recwarn):
        songs = make_songs()
        report = analysis.unit_informativeness(model, songs)
        path = tmp_path / "units.json"
        analysis.save_unit_report(report, path)
        loaded = analysis.load_unit_report(path)
        np.testing.assert_array_equal(report.mean_kl, loaded.mean_kl)
        assert loaded.selected_units == report.selected_units
        assert loaded.method == report.method


class TestCompression:
    def test_restricts_vectors(self):
        records = [analysis.EmbeddingRecord("a", np.arange(4.0)),
                   analysis.EmbeddingRecord("b", np.arange(4.0) * 2)]
        out = analysis.compress_embeddings(records, [3, 1])
        np.testing.assert_array_equal(out[0].vector, [1.0, 3.0])
        np.testing.assert_array_equal(out[1].vector, [2.0, 6.0])
        # originals untouched
        assert records[0].vector.shape == (4,)

    def test_empty_selection_rejected(self):
        records = [analysis.EmbeddingRecord("a", np.arange(4.0))]
        with pytest.raises(ValidationError):
            analysis.compress_embeddings(records, [])

    def test_out_of_range_rejected(self):
        records = [analysis.EmbeddingRecord("a", np.arange(4.0))]
        with pytest.raises(ValidationError):
            analysis.compress_embeddings(records, [5])


class TestProbes:
    def test_full_reconstruction_shape(self, model):
        song = make_songs(1)[0]
        recon = analysis.reconstruct_probe(model, song, "full")
        assert recon.shape == song.values.shape

    def test_zero_local_differs_from_full(self, model):
        song = make_songs(1)[0]
        full = analysis.reconstruct_probe(model, song, "full")
        zeroed = analysis.reconstruct_probe(model, song, "zero-local")
        assert np.abs(full - zeroed).max() > 0

    def test_traverse_returns_one_per_value(self, model):
        song = make_songs(1)[0]
        out = analysis.reconstruct_probe(model, song, "traverse", unit=0)
        assert len(out) == len(analysis.TRAVERSAL_VALUES)
        assert all(r.shape == song.values.shape for r in out)

    def test_traverse_requires_valid_unit(self, model):
        song = make_songs(1)[0]
        with pytest.raises(ValidationError):
            analysis.reconstruct_probe(model, song, "traverse")
        with pytest.raises(ValidationError):
            analysis.reconstruct_probe(model, song, "traverse", unit=99)

    def test_unknown_mode_rejected(self, model):
        song = make_songs(1)[0]
        with pytest.raises(ValidationError):
            analysis.reconstruct_probe(model, song, "upside-down")

    def test_traversal_response_nonnegative(self, model):
        songs = make_songs(2)
        value = analysis.traversal_response(model, songs, unit=0)
        assert value >= 0.0

    def test_probe_works_on_vanilla(self, vanilla_model):
        song = make_songs(1)[0]
        recon = analysis.reconstruct_probe(vanilla_model, song, "full")
        assert recon.shape == song.values.shape
