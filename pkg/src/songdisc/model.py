"""Dual-encoder song autoencoder and the single-encoder baseline.

The dual model routes each spectrogram through two encoders. The global
encoder sees the song in order and produces a per-frame diagonal Gaussian
over d_g channels. The local encoder sees the same song with its time axis
shuffled in fixed-length segments, so sequence order is unrecoverable, and
produces a single d_l-dimensional Gaussian per song. The decoder attends
over the global latent sequence with the local vector broadcast along time.

All passes are hand-written numpy; the working dtype is chosen when the
model is built (float64 for exactness, float32 for faster training). The
checkpoint format stores float32 tensors behind a one-line JSON header.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import FormatError, ValidationError
from .fileio import atomic_write_bytes
from .nn import (AttentionBlock, AvgPool2, BatchNorm1d, ClampLogVar, Conv1d,
                 LayerNorm, Linear, MaskedMeanPool, ReLU, make_mask,
                 positional_encoding)

SEGMENT_LENGTH = 32


@dataclass(frozen=True)
class ModelHyper:
    n_mels: int = 80
    width: int = 256
    d_g: int = 128
    d_l: int = 128
    heads: int = 4
    variant: str = "dual"

    def validate(self):
        if self.variant not in ("dual", "vanilla"):
            raise ValidationError(f"unknown variant: {self.variant!r}")
        for field in ("n_mels", "width", "d_g", "d_l", "heads"):
            if getattr(self, field) <= 0:
                raise ValidationError(f"{field} must be positive")
        if self.width % self.heads != 0:
            raise ValidationError("width must be divisible by heads")


@dataclass
class DiagonalGaussian:
    """Mean and log-variance arrays of identical shape."""
    mean: np.ndarray
    log_variance: np.ndarray

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal(self.mean.shape).astype(self.mean.dtype)
        return reparameterize(self.mean, self.log_variance, eps)

    def kl_to_standard_normal(self) -> np.ndarray:
        from .objective import gaussian_kl_per_unit
        return gaussian_kl_per_unit(self.mean, self.log_variance)


def reparameterize(mean, log_variance, eps):
    """mean + sigma * eps with sigma = exp(log_variance / 2)."""
    return mean + np.exp(0.5 * log_variance) * eps


def segment_slices(t: int, segment_length: int = SEGMENT_LENGTH):
    """Fixed-length segment boundaries; a shorter remainder keeps its own slot."""
    if t <= 0:
        raise ValidationError("cannot segment an empty time axis")
    bounds = list(range(0, t, segment_length)) + [t]
    return [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


def shuffle_segments(values: np.ndarray, rng: np.random.Generator,
                     segment_length: int = SEGMENT_LENGTH) -> np.ndarray:
    """Permute fixed-length time segments of a [C, T] array uniformly.

    Frames inside a segment stay in order; the remainder segment travels as
    one block like any other.
    """
    slices = segment_slices(values.shape[-1], segment_length)
    perm = rng.permutation(len(slices))
    parts = [values[..., slices[i][0]:slices[i][1]] for i in perm]
    return np.concatenate(parts, axis=-1)


class _ConvBnRelu:
    """conv(k=3) -> batch norm -> relu, the shared trunk block."""

    def __init__(self, c: int, rng, dtype=np.float64):
        self.conv = Conv1d(c, c, 3, rng, dtype=dtype)
        self.bn = BatchNorm1d(c, dtype=dtype)
        self.relu = ReLU()

    def forward(self, x, mask, training, update_stats):
        h = self.conv.forward(x, mask)
        h = self.bn.forward(h, mask, training=training, update_stats=update_stats)
        return self.relu.forward(h)

    def backward(self, dy):
        return self.conv.backward(self.bn.backward(self.relu.backward(dy)))

    def params(self):
        return [("conv." + n, p) for n, p in self.conv.params()] + \
               [("bn." + n, p) for n, p in self.bn.params()]

    def buffers(self):
        return [("bn." + n, v) for n, v in self.bn.buffers()]


class _AttnTrunk:
    """Positional encoding followed by two attention blocks."""

    def __init__(self, c: int, heads: int, rng, dtype=np.float64):
        self.c = c
        self.dtype = dtype
        self.block1 = AttentionBlock(c, heads, rng, dtype)
        self.block2 = AttentionBlock(c, heads, rng, dtype)

    def forward(self, x, mask):
        pe = positional_encoding(self.c, x.shape[-1], self.dtype)
        self._mask = mask
        h = (x + pe[None]) * mask
        h = self.block1.forward(h, mask)
        return self.block2.forward(h, mask)

    def backward(self, dy):
        dy = self.block1.backward(self.block2.backward(dy))
        return dy * self._mask

    def params(self):
        return [("block1." + n, p) for n, p in self.block1.params()] + \
               [("block2." + n, p) for n, p in self.block2.params()]


class GlobalEncoder:
    """Order-aware encoder to a per-frame diagonal Gaussian [B, d_g, T]."""

    def __init__(self, hyper: ModelHyper, rng, dtype=np.float64):
        w = hyper.width
        self.in_proj = Conv1d(hyper.n_mels, w, 1, rng, dtype=dtype)
        self.trunk1 = _ConvBnRelu(w, rng, dtype)
        self.trunk2 = _ConvBnRelu(w, rng, dtype)
        self.attn = _AttnTrunk(w, hyper.heads, rng, dtype)
        self.head_mean = Conv1d(w, hyper.d_g, 1, rng, zero_init=True, dtype=dtype)
        self.head_logvar = Conv1d(w, hyper.d_g, 1, rng, zero_init=True, dtype=dtype)
        self.clamp = ClampLogVar()

    def forward(self, x, mask, training=True, update_stats=True):
        h = self.in_proj.forward(x, mask)
        h = self.trunk1.forward(h, mask, training, update_stats)
        h = self.trunk2.forward(h, mask, training, update_stats)
        h = self.attn.forward(h, mask)
        mean = self.head_mean.forward(h, mask)
        log_var = self.clamp.forward(self.head_logvar.forward(h, mask))
        return DiagonalGaussian(mean, log_var)

    def backward(self, dmean, dlogvar):
        dh = self.head_mean.backward(dmean)
        dh += self.head_logvar.backward(self.clamp.backward(dlogvar))
        dh = self.attn.backward(dh)
        dh = self.trunk2.backward(dh)
        dh = self.trunk1.backward(dh)
        return self.in_proj.backward(dh)

    def params(self):
        out = []
        for prefix, mod in (("in_proj", self.in_proj), ("trunk1", self.trunk1),
                            ("trunk2", self.trunk2), ("attn", self.attn),
                            ("head_mean", self.head_mean),
                            ("head_logvar", self.head_logvar)):
            out += [(f"{prefix}.{n}", p) for n, p in mod.params()]
        return out

    def buffers(self):
        return [("trunk1." + n, v) for n, v in self.trunk1.buffers()] + \
               [("trunk2." + n, v) for n, v in self.trunk2.buffers()]


class LocalEncoder:
    """Order-blind encoder to a per-song diagonal Gaussian [B, d_l].

    Fed the segment-shuffled spectrogram; convolutions and pooling reduce
    time, a masked mean erases what remains of it.
    """

    def __init__(self, hyper: ModelHyper, rng, dtype=np.float64):
        w = hyper.width
        self.in_proj = Conv1d(hyper.n_mels, w, 1, rng, dtype=dtype)
        self.conv1, self.relu1, self.pool1 = Conv1d(w, w, 3, rng, dtype=dtype), ReLU(), AvgPool2()
        self.conv2, self.relu2, self.pool2 = Conv1d(w, w, 3, rng, dtype=dtype), ReLU(), AvgPool2()
        self.conv3, self.relu3, self.pool3 = Conv1d(w, w, 5, rng, dtype=dtype), ReLU(), AvgPool2()
        self.norm = LayerNorm(w, dtype=dtype)
        self.pool = MaskedMeanPool()
        self.head_mean = Linear(w, hyper.d_l, rng, zero_init=True, dtype=dtype)
        self.head_logvar = Linear(w, hyper.d_l, rng, zero_init=True, dtype=dtype)
        self.clamp = ClampLogVar()

    def forward(self, x, mask, lengths):
        h = self.in_proj.forward(x, mask)
        for conv, relu, pool in ((self.conv1, self.relu1, self.pool1),
                                 (self.conv2, self.relu2, self.pool2),
                                 (self.conv3, self.relu3, self.pool3)):
            h = relu.forward(conv.forward(h, mask))
            h, mask, lengths = pool.forward(h, mask, lengths)
        h = self.norm.forward(h, mask)
        h = self.pool.forward(h, mask, lengths)
        mean = self.head_mean.forward(h)
        log_var = self.clamp.forward(self.head_logvar.forward(h))
        return DiagonalGaussian(mean, log_var)

    def backward(self, dmean, dlogvar):
        dh = self.head_mean.backward(dmean)
        dh += self.head_logvar.backward(self.clamp.backward(dlogvar))
        dh = self.pool.backward(dh)
        dh = self.norm.backward(dh)
        for conv, relu, pool in ((self.conv3, self.relu3, self.pool3),
                                 (self.conv2, self.relu2, self.pool2),
                                 (self.conv1, self.relu1, self.pool1)):
            dh = conv.backward(relu.backward(pool.backward(dh)))
        return self.in_proj.backward(dh)

    def params(self):
        out = []
        for prefix, mod in (("in_proj", self.in_proj), ("conv1", self.conv1),
                            ("conv2", self.conv2), ("conv3", self.conv3),
                            ("norm", self.norm), ("head_mean", self.head_mean),
                            ("head_logvar", self.head_logvar)):
            out += [(f"{prefix}.{n}", p) for n, p in mod.params()]
        return out

    def buffers(self):
        return []


class Decoder:
    """Reconstruct [B, n_mels, T] from the global sequence plus local vector."""

    def __init__(self, hyper: ModelHyper, rng, d_in=None, dtype=np.float64):
        w = hyper.width
        if d_in is None:
            d_in = hyper.d_g + hyper.d_l
        self.d_in = d_in
        self.in_proj = Conv1d(d_in, w, 1, rng, dtype=dtype)
        self.trunk1 = _ConvBnRelu(w, rng, dtype)
        self.trunk2 = _ConvBnRelu(w, rng, dtype)
        self.attn = _AttnTrunk(w, hyper.heads, rng, dtype)
        self.out = Conv1d(w, hyper.n_mels, 1, rng, dtype=dtype)

    def forward(self, z, mask, training=True, update_stats=True):
        h = self.in_proj.forward(z, mask)
        h = self.trunk1.forward(h, mask, training, update_stats)
        h = self.trunk2.forward(h, mask, training, update_stats)
        h = self.attn.forward(h, mask)
        return self.out.forward(h, mask)

    def backward(self, dy):
        dh = self.out.backward(dy)
        dh = self.attn.backward(dh)
        dh = self.trunk2.backward(dh)
        dh = self.trunk1.backward(dh)
        return self.in_proj.backward(dh)

    def params(self):
        out = []
        for prefix, mod in (("in_proj", self.in_proj), ("trunk1", self.trunk1),
                            ("trunk2", self.trunk2), ("attn", self.attn),
                            ("out", self.out)):
            out += [(f"{prefix}.{n}", p) for n, p in mod.params()]
        return out

    def buffers(self):
        return [("trunk1." + n, v) for n, v in self.trunk1.buffers()] + \
               [("trunk2." + n, v) for n, v in self.trunk2.buffers()]


class DualVae:
    def __init__(self, hyper: ModelHyper, rng, dtype=np.float64):
        hyper.validate()
        if hyper.variant != "dual":
            raise ValidationError("DualVae requires variant='dual'")
        self.hyper = hyper
        self.dtype = np.dtype(dtype)
        self.global_encoder = GlobalEncoder(hyper, rng, dtype)
        self.local_encoder = LocalEncoder(hyper, rng, dtype)
        self.decoder = Decoder(hyper, rng, dtype=dtype)
        self._cache = None

    def forward(self, x, x_shuffled, lengths, eps_g, eps_l,
                training=True, update_stats=True):
        """Full training pass; returns posteriors, samples and reconstruction.

        x and x_shuffled are [B, n_mels, T] padded to a common T; padded
        frames are zeroed on entry so downstream layers never see them.
        """
        mask = make_mask(lengths, x.shape[-1], self.dtype)
        x = np.asarray(x, self.dtype) * mask
        x_shuffled = np.asarray(x_shuffled, self.dtype) * mask
        eps_g = np.asarray(eps_g, self.dtype)
        eps_l = np.asarray(eps_l, self.dtype)
        q_g = self.global_encoder.forward(x, mask, training, update_stats)
        q_l = self.local_encoder.forward(x_shuffled, mask, lengths)
        z_g = reparameterize(q_g.mean, q_g.log_variance, eps_g) * mask
        z_l = reparameterize(q_l.mean, q_l.log_variance, eps_l)
        z = np.concatenate([z_g, np.broadcast_to(
            z_l[:, :, None], z_l.shape + (x.shape[-1],)) * mask], axis=1)
        x_hat = self.decoder.forward(z, mask, training, update_stats)
        self._cache = (mask, q_g, q_l, eps_g, eps_l)
        return {"mask": mask, "q_g": q_g, "q_l": q_l,
                "z_g": z_g, "z_l": z_l, "x_hat": x_hat}

    def backward(self, dx_hat, dmean_g, dlogvar_g, dmean_l, dlogvar_l):
        """Accumulate parameter gradients from loss gradients on the outputs."""
        mask, q_g, q_l, eps_g, eps_l = self._cache
        dz = self.decoder.backward(dx_hat)
        d_g = self.hyper.d_g
        dz_g = dz[:, :d_g] * mask
        dz_l = (dz[:, d_g:] * mask).sum(axis=2)
        # reparameterization: z = mean + exp(logvar/2) * eps
        dmean_g = dmean_g + dz_g
        dlogvar_g = dlogvar_g + dz_g * eps_g * 0.5 * np.exp(0.5 * q_g.log_variance)
        dmean_l = dmean_l + dz_l
        dlogvar_l = dlogvar_l + dz_l * eps_l * 0.5 * np.exp(0.5 * q_l.log_variance)
        self.global_encoder.backward(dmean_g, dlogvar_g)
        self.local_encoder.backward(dmean_l, dlogvar_l)

    def named_params(self):
        return [("global_encoder." + n, p) for n, p in self.global_encoder.params()] + \
               [("local_encoder." + n, p) for n, p in self.local_encoder.params()] + \
               [("decoder." + n, p) for n, p in self.decoder.params()]

    def named_buffers(self):
        return [("global_encoder." + n, v) for n, v in self.global_encoder.buffers()] + \
               [("decoder." + n, v) for n, v in self.decoder.buffers()]

    def submodules(self):
        return {"global_encoder": self.global_encoder,
                "local_encoder": self.local_encoder,
                "decoder": self.decoder}


class VanillaVae:
    """Single-encoder baseline: one per-song latent, no factorization."""

    def __init__(self, hyper: ModelHyper, rng, dtype=np.float64):
        hyper.validate()
        if hyper.variant != "vanilla":
            raise ValidationError("VanillaVae requires variant='vanilla'")
        self.hyper = hyper
        self.dtype = np.dtype(dtype)
        w = hyper.width
        self.in_proj = Conv1d(hyper.n_mels, w, 1, rng, dtype=dtype)
        self.trunk1 = _ConvBnRelu(w, rng, dtype)
        self.trunk2 = _ConvBnRelu(w, rng, dtype)
        self.attn = _AttnTrunk(w, hyper.heads, rng, dtype)
        self.pool = MaskedMeanPool()
        self.head_mean = Linear(w, hyper.d_l, rng, zero_init=True, dtype=dtype)
        self.head_logvar = Linear(w, hyper.d_l, rng, zero_init=True, dtype=dtype)
        self.clamp = ClampLogVar()
        self.decoder = Decoder(hyper, rng, d_in=hyper.d_l, dtype=dtype)
        self._cache = None

    def encode(self, x, mask, lengths, training=True, update_stats=True):
        h = self.in_proj.forward(x, mask)
        h = self.trunk1.forward(h, mask, training, update_stats)
        h = self.trunk2.forward(h, mask, training, update_stats)
        h = self.attn.forward(h, mask)
        h = self.pool.forward(h, mask, lengths)
        mean = self.head_mean.forward(h)
        log_var = self.clamp.forward(self.head_logvar.forward(h))
        return DiagonalGaussian(mean, log_var)

    def forward(self, x, lengths, eps, training=True, update_stats=True):
        mask = make_mask(lengths, x.shape[-1], self.dtype)
        x = np.asarray(x, self.dtype) * mask
        eps = np.asarray(eps, self.dtype)
        q = self.encode(x, mask, lengths, training, update_stats)
        z = reparameterize(q.mean, q.log_variance, eps)
        z_field = np.broadcast_to(z[:, :, None], z.shape + (x.shape[-1],)) * mask
        x_hat = self.decoder.forward(z_field, mask, training, update_stats)
        self._cache = (mask, q, eps)
        return {"mask": mask, "q": q, "z": z, "x_hat": x_hat}

    def backward(self, dx_hat, dmean, dlogvar):
        mask, q, eps = self._cache
        dz_field = self.decoder.backward(dx_hat)
        dz = (dz_field * mask).sum(axis=2)
        dmean = dmean + dz
        dlogvar = dlogvar + dz * eps * 0.5 * np.exp(0.5 * q.log_variance)
        dh = self.head_mean.backward(dmean)
        dh += self.head_logvar.backward(self.clamp.backward(dlogvar))
        dh = self.pool.backward(dh)
        dh = self.attn.backward(dh)
        dh = self.trunk2.backward(dh)
        dh = self.trunk1.backward(dh)
        self.in_proj.backward(dh)

    def named_params(self):
        out = []
        for prefix, mod in (("encoder.in_proj", self.in_proj),
                            ("encoder.trunk1", self.trunk1),
                            ("encoder.trunk2", self.trunk2),
                            ("encoder.attn", self.attn),
                            ("encoder.head_mean", self.head_mean),
                            ("encoder.head_logvar", self.head_logvar)):
            out += [(f"{prefix}.{n}", p) for n, p in mod.params()]
        return out + [("decoder." + n, p) for n, p in self.decoder.params()]

    def named_buffers(self):
        return [("encoder.trunk1." + n, v) for n, v in self.trunk1.buffers()] + \
               [("encoder.trunk2." + n, v) for n, v in self.trunk2.buffers()] + \
               [("decoder." + n, v) for n, v in self.decoder.buffers()]


def build_model(hyper: ModelHyper, seed: int, dtype=np.float64):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0])))
    if hyper.variant == "vanilla":
        return VanillaVae(hyper, rng, dtype)
    return DualVae(hyper, rng, dtype)


def parameter_counts(model) -> dict:
    """Parameter totals per top-level submodule plus a grand total."""
    counts = {}
    for name, p in model.named_params():
        top = name.split(".", 1)[0]
        counts[top] = counts.get(top, 0) + p.value.size
    counts["total"] = sum(v for k, v in counts.items())
    return counts


def zero_grads(model):
    for _, p in model.named_params():
        p.grad[...] = 0.0


def get_flat_params(model):
    return np.concatenate([p.value.ravel() for _, p in model.named_params()])


def set_flat_params(model, flat):
    i = 0
    for _, p in model.named_params():
        n = p.value.size
        p.value[...] = flat[i:i + n].reshape(p.value.shape)
        i += n
    if i != flat.size:
        raise ValidationError("flat parameter vector has wrong length")


def get_flat_grads(model):
    return np.concatenate([p.grad.ravel() for _, p in model.named_params()])


CHECKPOINT_FORMAT = "songdisc-model"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model, step: int):
    """One JSON header line, then the named float32 tensors concatenated."""
    tensors = [(n, p.value, False) for n, p in model.named_params()]
    tensors += [(n, v, True) for n, v in model.named_buffers()]
    table = [{"name": n, "shape": list(v.shape), "buffer": b}
             for n, v, b in tensors]
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
              "step": step, "hyper": asdict(model.hyper),
              "dtype": model.dtype.name, "tensors": table}
    blob = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes()
                    for _, v, _ in tensors)
    atomic_write_bytes(path, json.dumps(header).encode() + b"\n" + blob)


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; returns (model, step)."""
    with open(path, "rb") as fh:
        line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad checkpoint header: {exc}") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a model checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')}")
    hyper = ModelHyper(**header["hyper"])
    model = build_model(hyper, seed=0, dtype=np.dtype(header.get("dtype", "float64")))
    slots = {n: p.value for n, p in model.named_params()}
    slots.update(model.named_buffers())
    offset = 0
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in slots:
            raise ValidationError(f"{path}: unexpected tensor {name!r}")
        target = slots.pop(name)
        if target.shape != shape:
            raise ValidationError(
                f"{path}: tensor {name!r} has shape {shape}, expected {target.shape}")
        n = int(np.prod(shape)) if shape else 1
        chunk = blob[offset:offset + 4 * n]
        if len(chunk) != 4 * n:
            raise FormatError(f"{path}: truncated tensor data at {name!r}")
        target[...] = np.frombuffer(chunk, dtype="<f4").reshape(shape)
        offset += 4 * n
    if slots:
        missing = sorted(slots)[0]
        raise ValidationError(f"{path}: missing tensor {missing!r}")
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return model, int(header["step"])
