"""Synthetic structured-song corpus for fast end-to-end verification.

Each song type is a triple (note template pair, base frequency bin, syntax
pattern over {A, B}). A song repeats its pattern a sampled number of times,
so one type occurs at several lengths; notes carry an overtone band twelve
bins up at half amplitude, mimicking harmonic structure. Every type belongs
to its own individual, so a split by individual holds out whole types.
"""

from dataclasses import dataclass

import numpy as np

from .data import MAX_FRAMES, MIN_FRAMES, N_MELS, MelSpectrogram, minmax_normalize
from .errors import ValidationError

OVERTONE_OFFSET = 12
OVERTONE_GAIN = 0.5
B_NOTE_OFFSET = 5
EDGE_PAD = 4


def _ridge(length, centers, width):
    rows = np.arange(N_MELS)[:, None]
    return np.exp(-0.5 * ((rows - centers[None, :]) / width) ** 2)


def _blob(length, f0):
    t = np.arange(length)
    env = np.exp(-0.5 * ((t - (length - 1) / 2) / (length / 4)) ** 2)
    return _ridge(length, np.full(length, float(f0)), 1.5) * env[None, :]


def _upsweep(length, f0):
    t = np.arange(length)
    return _ridge(length, f0 + 8.0 * t / (length - 1), 1.2)


def _downsweep(length, f0):
    t = np.arange(length)
    return _ridge(length, f0 + 8.0 * (1.0 - t / (length - 1)), 1.2)


def _chevron(length, f0):
    t = np.arange(length)
    return _ridge(length, f0 + 5.0 * np.sin(np.pi * t / (length - 1)), 1.2)


NOTE_SHAPES = {
    "blob": (8, _blob),
    "upsweep": (8, _upsweep),
    "downsweep": (8, _downsweep),
    "chevron": (10, _chevron),
}

NOTE_TEMPLATES = {
    "blob-upsweep": ("blob", "upsweep"),
    "upsweep-downsweep": ("upsweep", "downsweep"),
    "downsweep-chevron": ("downsweep", "chevron"),
    "chevron-blob": ("chevron", "blob"),
}


@dataclass(frozen=True)
class SyntheticSongSpec:
    note_template_id: str
    notes_per_song: int
    note_gap: int
    base_frequency_bin: int
    noise_level: float
    syntax_pattern: str
    onset_jitter_max: int = 0

    def validate(self):
        if self.note_template_id not in NOTE_TEMPLATES:
            raise ValidationError(f"unknown note template {self.note_template_id!r}")
        if not self.syntax_pattern or set(self.syntax_pattern) - {"A", "B"}:
            raise ValidationError(
                f"syntax pattern must be a nonempty string over A/B, "
                f"got {self.syntax_pattern!r}")
        if self.notes_per_song < len(self.syntax_pattern):
            raise ValidationError("notes_per_song shorter than one pattern")
        if self.note_gap < 0 or self.noise_level < 0:
            raise ValidationError("note_gap and noise_level must be nonnegative")
        if self.onset_jitter_max < 0:
            raise ValidationError("onset_jitter_max must be nonnegative")
        if not 0 <= self.base_frequency_bin < N_MELS:
            raise ValidationError("base_frequency_bin outside the Mel grid")

    @property
    def song_type(self) -> str:
        return (f"{self.note_template_id}"
                f"@{self.base_frequency_bin}:{self.syntax_pattern}")


def render_note(shape_id: str, f0: float) -> np.ndarray:
    """A note plus its overtone band, [N_MELS, note_length]."""
    length, fn = NOTE_SHAPES[shape_id]
    return fn(length, f0) + OVERTONE_GAIN * fn(length, f0 + OVERTONE_OFFSET)


def render_song(spec: SyntheticSongSpec, repeats: int) -> np.ndarray:
    """Deterministic noiseless song: the pattern repeated `repeats` times."""
    shape_a, shape_b = NOTE_TEMPLATES[spec.note_template_id]
    notes = []
    for symbol in spec.syntax_pattern * repeats:
        if symbol == "A":
            notes.append(render_note(shape_a, spec.base_frequency_bin))
        else:
            notes.append(render_note(shape_b, spec.base_frequency_bin + B_NOTE_OFFSET))
    gap = np.zeros((N_MELS, spec.note_gap))
    pad = np.zeros((N_MELS, EDGE_PAD))
    pieces = [pad]
    for i, note in enumerate(notes):
        if i:
            pieces.append(gap)
        pieces.append(note)
    pieces.append(pad)
    return np.concatenate(pieces, axis=1)


def nominal_repeats(spec: SyntheticSongSpec) -> int:
    return max(2, round(spec.notes_per_song / len(spec.syntax_pattern)))


def song_frames(spec: SyntheticSongSpec, repeats: int) -> int:
    """Frame count render_song(spec, repeats) will produce, without rendering."""
    shape_a, shape_b = NOTE_TEMPLATES[spec.note_template_id]
    lengths = {"A": NOTE_SHAPES[shape_a][0], "B": NOTE_SHAPES[shape_b][0]}
    per_repeat = sum(lengths[s] for s in spec.syntax_pattern)
    n_notes = repeats * len(spec.syntax_pattern)
    return 2 * EDGE_PAD + repeats * per_repeat + spec.note_gap * (n_notes - 1)


def valid_repeat_counts(spec: SyntheticSongSpec) -> list[int]:
    """Repeat counts near nominal whose song length fits the frame bounds,
    leaving headroom for the spec's onset jitter."""
    r_nom = nominal_repeats(spec)
    return [r for r in (r_nom - 1, r_nom, r_nom + 1)
            if r >= 1 and MIN_FRAMES <= song_frames(spec, r)
            and song_frames(spec, r) + spec.onset_jitter_max <= MAX_FRAMES]


def generate_synthetic_corpus(specs, seed: int, instances_per_spec: int = 50,
                              individual_ids=None):
    """Render every spec `instances_per_spec` times with per-instance length
    jitter and additive Gaussian noise; returns labeled spectrograms."""
    for spec in specs:
        spec.validate()
    if individual_ids is None:
        individual_ids = [f"ind-{i:02d}" for i in range(len(specs))]
    out = []
    for si, spec in enumerate(specs):
        repeat_choices = valid_repeat_counts(spec)
        if len(repeat_choices) < 2:
            raise ValidationError(
                f"spec {spec.song_type!r} admits {len(repeat_choices)} usable "
                f"repeat count(s); each song type must occur at two or more "
                f"lengths within [{MIN_FRAMES}, {MAX_FRAMES}] frames")
        for k in range(instances_per_spec):
            rng = np.random.default_rng(np.random.SeedSequence([seed, si, k]))
            repeats = repeat_choices[int(rng.integers(len(repeat_choices)))]
            values = render_song(spec, repeats)
            if spec.onset_jitter_max > 0:
                # split the jitter between leading and trailing silence so
                # the onset phase is not recoverable from the length alone
                total = int(rng.integers(spec.onset_jitter_max + 1))
                lead = int(rng.integers(total + 1))
                values = np.concatenate(
                    [np.zeros((N_MELS, lead)), values,
                     np.zeros((N_MELS, total - lead))], axis=1)
            if spec.noise_level > 0:
                values = values + rng.normal(0.0, spec.noise_level, values.shape)
            values = minmax_normalize(values)
            t = values.shape[1]
            if not MIN_FRAMES <= t <= MAX_FRAMES:
                raise ValidationError(
                    f"spec {spec.song_type!r} produced T={t}, outside "
                    f"[{MIN_FRAMES}, {MAX_FRAMES}]")
            out.append(MelSpectrogram(values, f"{spec.song_type}/{k:03d}",
                                      individual_ids[si], spec.song_type))
    return out


def desk_specs(noise_level: float = 0.05):
    """Eight song types spanning shared templates, shifted bases, and
    patterns with overlapping note inventories (AAB vs BAB).

    Base lengths are aligned across types into two narrow bands (104-107
    and 126-128 frames) and every type carries the same onset jitter, so
    temporal layout says nothing about the type while varying freely
    within it."""
    mk = SyntheticSongSpec
    return [
        mk("blob-upsweep", 10, 2, 20, noise_level, "AB", 24),
        mk("blob-upsweep", 12, 0, 38, noise_level, "ABB", 24),
        mk("upsweep-downsweep", 12, 0, 20, noise_level, "AAB", 24),
        mk("upsweep-downsweep", 12, 0, 20, noise_level, "BAB", 24),
        mk("downsweep-chevron", 10, 1, 28, noise_level, "AB", 24),
        mk("downsweep-chevron", 10, 1, 42, noise_level, "BA", 24),
        mk("chevron-blob", 10, 1, 24, noise_level, "AB", 24),
        mk("chevron-blob", 10, 1, 36, noise_level, "BA", 24),
    ]
