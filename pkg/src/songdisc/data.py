"""Audio ingestion, spectrogram container format, and dataset splitting.

Recordings become log-Mel spectrograms on a fixed grid: 1024-sample windows
hopped by 256 at 22050 Hz, 80 triangular Mel bands between 1500 and 10000 Hz,
natural log, then per-spectrogram min-max to [0, 1]. Frames are fully
contained windows (no padding), so T = floor((n - 1024) / 256) + 1 exactly.

Splits are by individual, never by song, so held-out individuals are truly
unseen; counts come from largest-remainder apportionment of the fractions.
"""

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

from .errors import FormatError, InputError, ValidationError
from .fileio import atomic_write_bytes

SAMPLE_RATE = 22050
WINDOW = 1024
HOP = 256
N_MELS = 80
F_MIN = 1500.0
F_MAX = 10000.0
LOG_FLOOR = 1e-10
MIN_FRAMES = 100
MAX_FRAMES = 400


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str


@dataclass
class MelSpectrogram:
    values: np.ndarray  # [N_MELS, T]
    song_id: str
    individual_id: str = ""
    song_type: str = ""

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list

    def individuals(self):
        return tuple(sorted({s.individual_id for s in part})
                     for part in (self.train, self.val, self.test))


_INT_SCALE = {np.dtype(np.int16): 32768.0, np.dtype(np.int32): 2147483648.0}


def _to_float(samples: np.ndarray) -> np.ndarray:
    if samples.dtype in _INT_SCALE:
        return samples.astype(np.float64) / _INT_SCALE[samples.dtype]
    if samples.dtype == np.uint8:
        return (samples.astype(np.float64) - 128.0) / 128.0
    return samples.astype(np.float64)


def load_and_resample(path) -> AudioClip:
    """Read a PCM WAV file as mono float samples at 22050 Hz."""
    try:
        rate, samples = wavfile.read(path)
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None
    except ValueError as exc:
        raise InputError(f"unreadable WAV file {path}: {exc}") from None
    if samples.size == 0:
        raise ValidationError(f"{path}: empty audio")
    samples = _to_float(samples)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if not np.all(np.isfinite(samples)):
        raise ValidationError(f"{path}: non-finite samples")
    if rate != SAMPLE_RATE:
        g = math.gcd(SAMPLE_RATE, int(rate))
        samples = resample_poly(samples, SAMPLE_RATE // g, int(rate) // g)
    return AudioClip(samples, SAMPLE_RATE, str(path))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels=N_MELS, n_fft=WINDOW, sample_rate=SAMPLE_RATE,
                   f_min=F_MIN, f_max=F_MAX) -> np.ndarray:
    """Triangular filters [n_mels, n_fft//2 + 1] with unit peaks."""
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (ctr - lo)
    down = (hi - freqs[None, :]) / (hi - ctr)
    return np.maximum(0.0, np.minimum(up, down))


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Map to [0, 1]; a constant matrix maps to all zeros."""
    lo = values.min()
    span = values.max() - lo
    if span == 0.0:
        return np.zeros_like(values)
    return (values - lo) / span


_FILTERBANK = None


def _filterbank():
    global _FILTERBANK
    if _FILTERBANK is None:
        _FILTERBANK = mel_filterbank()
    return _FILTERBANK


def frame_count(n_samples: int) -> int:
    return (n_samples - WINDOW) // HOP + 1


def mel_transform(clip: AudioClip) -> MelSpectrogram:
    """Log-Mel spectrogram of a clip; fails below one full window."""
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.size < WINDOW:
        raise ValidationError(
            f"{clip.source_id}: {x.size} samples is shorter than one window")
    t = frame_count(x.size)
    idx = HOP * np.arange(t)[:, None] + np.arange(WINDOW)[None, :]
    frames = x[idx] * get_window("hann", WINDOW, fftbins=True)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    mel = power @ _filterbank().T
    values = minmax_normalize(np.log(mel + LOG_FLOOR).T)
    return MelSpectrogram(values, song_id=clip.source_id)


def filter_by_length(specs, min_frames=MIN_FRAMES, max_frames=MAX_FRAMES):
    return [s for s in specs if min_frames <= s.n_frames <= max_frames]


def apportion(n: int, fractions) -> list:
    """Largest-remainder apportionment of n items to the fractions."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError("split fractions must sum to 1")
    quotas = [f * n for f in fractions]
    counts = [int(q) for q in quotas]
    order = sorted(range(len(fractions)),
                   key=lambda i: (quotas[i] - counts[i], -i), reverse=True)
    for i in order[:n - sum(counts)]:
        counts[i] += 1
    return counts


def split_by_individual(specs, fractions=(0.7, 0.1, 0.2), seed=0) -> DatasetSplit:
    """Partition songs into train/val/test by shuffled individual assignment."""
    if len(fractions) != 3:
        raise ValidationError("expected three split fractions")
    individuals = sorted({s.individual_id for s in specs})
    if len(individuals) < 3:
        raise ValidationError(
            f"need at least 3 individuals to split, got {len(individuals)}")
    counts = apportion(len(individuals), fractions)
    rng = np.random.default_rng(seed)
    shuffled = [individuals[i] for i in rng.permutation(len(individuals))]
    bounds = np.cumsum(counts)
    groups = (set(shuffled[:bounds[0]]), set(shuffled[bounds[0]:bounds[1]]),
              set(shuffled[bounds[1]:]))
    parts = [[s for s in specs if s.individual_id in g] for g in groups]
    return DatasetSplit(*parts)


CONTAINER_FORMAT = "songdisc-spectrograms"
CONTAINER_VERSION = 1


def save_spectrograms(path, specs):
    """One JSON metadata line, then each [80, T] matrix as little-endian f32."""
    records = [{"id": s.song_id, "individual_id": s.individual_id,
                "song_type": s.song_type, "n_frames": s.n_frames}
               for s in specs]
    header = {"format": CONTAINER_FORMAT, "version": CONTAINER_VERSION,
              "count": len(specs), "records": records}
    blob = b"".join(np.ascontiguousarray(s.values, dtype="<f4").tobytes()
                    for s in specs)
    atomic_write_bytes(path, json.dumps(header).encode() + b"\n" + blob)


def load_spectrograms(path):
    with open(path, "rb") as fh:
        line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad container header: {exc}") from None
    if header.get("format") != CONTAINER_FORMAT:
        raise FormatError(f"{path}: not a spectrogram container")
    if header.get("version") != CONTAINER_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')}")
    records = header.get("records", [])
    if header.get("count") != len(records):
        raise FormatError(f"{path}: record count disagrees with header count")
    specs = []
    offset = 0
    for rec in records:
        t = int(rec["n_frames"])
        nbytes = 4 * N_MELS * t
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{path}: truncated at record {rec['id']!r}")
        values = np.frombuffer(chunk, dtype="<f4").astype(np.float64)
        specs.append(MelSpectrogram(values.reshape(N_MELS, t), rec["id"],
                                    rec["individual_id"], rec["song_type"]))
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return specs
