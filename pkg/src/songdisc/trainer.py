"""Training loop: Adam, capacity annealing, metrics log, checkpoint/resume.

Each step samples songs uniformly, pads them to one batch, shuffles a copy of
each song for the order-blind encoder, and applies one clipped Adam update of
the capacity-constrained objective at the current annealed capacities. The
working dtype comes from the config (presets train in float32; float64 is
the exactness default) and every random draw comes from one generator in a
fixed order, so a run is a pure function of (config, corpus) and resuming
from a state checkpoint continues it bit-for-bit.

The metrics log is JSON lines with no timestamps; identical runs produce
byte-identical logs.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import FormatError, NumericError, TrainingDiverged, ValidationError
from .fileio import atomic_write_bytes
from .model import (DualVae, ModelHyper, VanillaVae, build_model,
                    parameter_counts, save_checkpoint, shuffle_segments,
                    zero_grads)
from .objective import (CapacitySchedule, LossTerms, LossWeights, capacity_at,
                        gaussian_kl_per_unit, kl_global_reduce, total_loss,
                        total_loss_grads)

STATE_FORMAT = "songdisc-trainstate"
STATE_VERSION = 1


@dataclass
class TrainingConfig:
    model: ModelHyper = field(default_factory=ModelHyper)
    batch_size: int = 64
    total_steps: int = 200000
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    c_g_max: float = 0.4
    c_l_max: float = 100.0
    ramp_steps: int = 20000
    grad_clip: float = 5.0
    seed: int = 0
    checkpoint_every: int = 5000
    scale_preset: str = "paper"
    dtype: str = "float64"

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self):
        self.model.validate()
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for name in ("batch_size", "learning_rate", "beta1", "beta2",
                     "adam_eps", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        for name in ("total_steps", "c_g_max", "c_l_max", "ramp_steps",
                     "grad_clip"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")

    def schedule_g(self):
        return CapacitySchedule(self.c_g_max, self.ramp_steps)

    def schedule_l(self):
        return CapacitySchedule(self.c_l_max, self.ramp_steps)


def paper_config(seed: int = 0) -> TrainingConfig:
    return TrainingConfig(seed=seed, dtype="float32")


def desk_config(seed: int = 0) -> TrainingConfig:
    """Small-scale preset: 16-unit latents, 5000 steps, batch 32; width,
    heads, rates and capacities sized for the synthetic corpus."""
    return TrainingConfig(
        model=ModelHyper(n_mels=80, width=16, d_g=16, d_l=16, heads=1),
        batch_size=32, total_steps=5000, learning_rate=3e-4,
        c_g_max=0.02, c_l_max=10.0, ramp_steps=1000, checkpoint_every=500,
        scale_preset="desk", seed=seed, dtype="float32")


def config_for_preset(preset: str, seed: int = 0) -> TrainingConfig:
    if preset == "paper":
        return paper_config(seed)
    if preset == "desk":
        return desk_config(seed)
    raise ValidationError(f"unknown preset {preset!r}")


class Adam:
    """Adaptive-moment optimizer with bias correction; slots match param dtype."""

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.value) for n, p in self.named_params}
        self.v = {n: np.zeros_like(p.value) for n, p in self.named_params}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for n, p in self.named_params:
            m = self.m[n]
            v = self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad ** 2
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def global_grad_norm(model) -> float:
    total = 0.0
    for _, p in model.named_params():
        total += float((p.grad ** 2).sum())
    return math.sqrt(total)


def clip_gradients(model, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    norm = global_grad_norm(model)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, p in model.named_params():
            p.grad *= scale
    return norm


@dataclass
class TrainState:
    model: object
    opt: Adam
    rng: np.random.Generator
    step: int = 0
    best_val: float = None


def assemble_batch(songs, rng, hyper: ModelHyper, shuffled: bool,
                   dtype=np.float64):
    """Pad songs to one batch; draw per-song shuffles then noise, in order.

    Random draws happen in float64 regardless of dtype, so float32 and
    float64 runs consume the generator identically.
    """
    lengths = np.array([s.n_frames for s in songs])
    t = int(lengths.max())
    b = len(songs)
    x = np.zeros((b, hyper.n_mels, t), dtype=dtype)
    x_shuf = np.zeros((b, hyper.n_mels, t), dtype=dtype) if shuffled else None
    for i, s in enumerate(songs):
        x[i, :, :s.n_frames] = s.values
        if shuffled:
            x_shuf[i, :, :s.n_frames] = shuffle_segments(s.values, rng)
    if shuffled:
        eps_g = rng.standard_normal((b, hyper.d_g, t)).astype(dtype)
        eps_l = rng.standard_normal((b, hyper.d_l)).astype(dtype)
        return x, x_shuf, lengths, eps_g, eps_l
    eps = rng.standard_normal((b, hyper.d_l)).astype(dtype)
    return x, lengths, eps


def dual_step(model: DualVae, batch, weights, c_g, c_l, with_grads=True,
              training=True, update_stats=True) -> LossTerms:
    """Forward, loss, and (optionally) backward for the dual model."""
    x, x_shuf, lengths, eps_g, eps_l = batch
    out = model.forward(x, x_shuf, lengths, eps_g, eps_l,
                        training=training, update_stats=update_stats)
    q_g = (out["q_g"].mean, out["q_g"].log_variance)
    q_l = (out["q_l"].mean, out["q_l"].log_variance)
    terms = total_loss(x, q_g, q_l, out["x_hat"], out["mask"], lengths,
                       weights, c_g, c_l)
    if with_grads and math.isfinite(terms.total):
        grads = total_loss_grads(x, q_g, q_l, out["x_hat"], out["mask"],
                                 lengths, weights, terms)
        model.backward(*grads)
    return terms


def vanilla_step(model: VanillaVae, batch, weights, c_g, c_l, with_grads=True,
                 training=True, update_stats=True) -> LossTerms:
    """Same objective shape for the baseline; only the per-song KL is live."""
    x, lengths, eps = batch
    out = model.forward(x, lengths, eps, training=training,
                        update_stats=update_stats)
    zeros = (np.zeros((x.shape[0], 1, x.shape[2]), dtype=x.dtype),
             np.zeros((x.shape[0], 1, x.shape[2]), dtype=x.dtype))
    q = (out["q"].mean, out["q"].log_variance)
    terms = total_loss(x, zeros, q, out["x_hat"], out["mask"], lengths,
                       weights, c_g, c_l)
    if with_grads and math.isfinite(terms.total):
        grads = total_loss_grads(x, zeros, q, out["x_hat"], out["mask"],
                                 lengths, weights, terms)
        model.backward(grads[0], grads[3], grads[4])
    return terms


def _chunks(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def validation_loss(model, songs, config: TrainingConfig, c_g, c_l, step: int):
    """Objective on the validation set at the active capacities.

    Chunked to bound padding; per-song contributions are aggregated before
    the capacity terms, so the result equals one giant-batch evaluation.
    Uses its own generator keyed by step, leaving the training stream alone.
    """
    if not songs:
        return None
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2, step]))
    dual = isinstance(model, DualVae)
    hyper = model.hyper
    recon_sum = kg_sum = kl_sum = 0.0
    for chunk in _chunks(songs, config.batch_size):
        batch = assemble_batch(chunk, rng, hyper, shuffled=dual,
                               dtype=model.dtype)
        b = len(chunk)
        if dual:
            x, x_shuf, lengths, eps_g, eps_l = batch
            out = model.forward(x, x_shuf, lengths, eps_g, eps_l,
                                training=False, update_stats=False)
            kg = kl_global_reduce(
                gaussian_kl_per_unit(out["q_g"].mean, out["q_g"].log_variance),
                out["mask"], lengths)
            kl = float(gaussian_kl_per_unit(
                out["q_l"].mean, out["q_l"].log_variance).sum(axis=1).mean())
        else:
            x, lengths, eps = batch
            out = model.forward(x, lengths, eps, training=False,
                                update_stats=False)
            kg = 0.0
            kl = float(gaussian_kl_per_unit(
                out["q"].mean, out["q"].log_variance).sum(axis=1).mean())
        resid = (x - out["x_hat"]) * out["mask"]
        recon = float(0.5 * (resid ** 2).sum()
                      + 0.5 * out["mask"].sum() * hyper.n_mels
                      * np.log(2 * np.pi)) / b
        recon_sum += recon * b
        kg_sum += kg * b
        kl_sum += kl * b
    n = len(songs)
    w = config.weights
    return (recon_sum / n
            + w.gamma_g * abs(kg_sum / n - c_g)
            + w.gamma_l * abs(kl_sum / n - c_l))


def _json_line(record: dict) -> bytes:
    return (json.dumps(record, separators=(",", ":")) + "\n").encode()


def save_train_state(path, state: TrainState, variant: str):
    tensors = [(n, p.value, "param") for n, p in state.model.named_params()]
    tensors += [(f"m.{n}", state.opt.m[n], "adam") for n, _ in state.opt.named_params]
    tensors += [(f"v.{n}", state.opt.v[n], "adam") for n, _ in state.opt.named_params]
    tensors += [(n, v, "buffer") for n, v in state.model.named_buffers()]
    wire = "<f4" if state.model.dtype == np.float32 else "<f8"
    header = {
        "format": STATE_FORMAT, "version": STATE_VERSION, "variant": variant,
        "step": state.step, "best_val": state.best_val, "adam_t": state.opt.t,
        "hyper": asdict(state.model.hyper), "dtype": state.model.dtype.name,
        "rng_state": state.rng.bit_generator.state,
        "tensors": [{"name": n, "shape": list(v.shape), "kind": k}
                    for n, v, k in tensors],
    }
    blob = b"".join(np.ascontiguousarray(v, dtype=wire).tobytes()
                    for n, v, k in tensors)
    atomic_write_bytes(path, json.dumps(header).encode() + b"\n" + blob)


def load_train_state(path, config: TrainingConfig) -> TrainState:
    with open(path, "rb") as fh:
        line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad state header: {exc}") from None
    if header.get("format") != STATE_FORMAT:
        raise FormatError(f"{path}: not a training state file")
    stored_dtype = header.get("dtype", "float64")
    if stored_dtype != config.dtype:
        raise ValidationError(
            f"{path}: state is {stored_dtype}, config wants {config.dtype}")
    hyper = ModelHyper(**header["hyper"])
    model = build_model(hyper, seed=0, dtype=np.dtype(stored_dtype))
    opt = Adam(model.named_params(), config.learning_rate, config.beta1,
               config.beta2, config.adam_eps)
    opt.t = int(header["adam_t"])
    slots = {n: p.value for n, p in model.named_params()}
    slots |= {f"m.{n}": opt.m[n] for n, _ in opt.named_params}
    slots |= {f"v.{n}": opt.v[n] for n, _ in opt.named_params}
    slots |= dict(model.named_buffers())
    offset = 0
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in slots:
            raise ValidationError(f"{path}: unexpected tensor {name!r}")
        target = slots.pop(name)
        if target.shape != shape:
            raise ValidationError(f"{path}: tensor {name!r} has shape {shape}, "
                                  f"expected {target.shape}")
        wire = "<f4" if stored_dtype == "float32" else "<f8"
        size = np.dtype(wire).itemsize
        n = int(np.prod(shape)) if shape else 1
        chunk = blob[offset:offset + size * n]
        if len(chunk) != size * n:
            raise FormatError(f"{path}: truncated at tensor {name!r}")
        target[...] = np.frombuffer(chunk, dtype=wire).reshape(shape)
        offset += size * n
    if slots:
        raise ValidationError(f"{path}: missing tensor {sorted(slots)[0]!r}")
    rng = np.random.default_rng(0)
    rng.bit_generator.state = header["rng_state"]
    return TrainState(model, opt, rng, step=int(header["step"]),
                      best_val=header["best_val"])


def fresh_train_state(config: TrainingConfig, variant: str) -> TrainState:
    hyper = config.model if variant == "dual" else \
        replace(config.model, variant="vanilla")
    model = build_model(hyper, seed=config.seed, dtype=config.np_dtype)
    opt = Adam(model.named_params(), config.learning_rate, config.beta1,
               config.beta2, config.adam_eps)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    return TrainState(model, opt, rng)


def _run_training(config: TrainingConfig, split, out_dir, variant,
                  resume=None) -> TrainState:
    config.validate()
    if not split.train:
        raise ValidationError("empty training split")
    os.makedirs(out_dir, exist_ok=True)
    if resume is not None:
        state = load_train_state(resume, config)
        if state.model.hyper.variant != (
                "vanilla" if variant == "vanilla" else "dual"):
            raise ValidationError("resume checkpoint is for a different variant")
        log_mode = "ab"
    else:
        state = fresh_train_state(config, variant)
        log_mode = "wb"
    step_fn = vanilla_step if variant == "vanilla" else dual_step
    hyper = state.model.hyper
    sched_g, sched_l = config.schedule_g(), config.schedule_l()
    counts = parameter_counts(state.model)
    atomic_write_bytes(os.path.join(out_dir, "params.json"),
                       json.dumps(counts, indent=2).encode() + b"\n")
    log_path = os.path.join(out_dir, "metrics.jsonl")
    saved = False
    with open(log_path, log_mode) as log:
        while state.step < config.total_steps:
            s = state.step
            c_g = capacity_at(sched_g, s)
            c_l = capacity_at(sched_l, s)
            n = len(split.train)
            idx = state.rng.choice(n, size=config.batch_size,
                                   replace=n < config.batch_size)
            songs = [split.train[i] for i in idx]
            zero_grads(state.model)
            batch = assemble_batch(songs, state.rng, hyper,
                                   shuffled=variant != "vanilla",
                                   dtype=state.model.dtype)
            try:
                terms = step_fn(state.model, batch, config.weights, c_g, c_l)
            except NumericError as exc:
                record = {"kind": "abort", "step": s, "error": str(exc)}
                log.write(_json_line(record))
                raise TrainingDiverged(f"non-finite values at step {s}",
                                       record) from None
            if not math.isfinite(terms.total):
                record = {"kind": "abort", **terms.as_record(s)}
                log.write(_json_line(record))
                raise TrainingDiverged(f"non-finite loss at step {s}", record)
            clip_gradients(state.model, config.grad_clip)
            state.opt.step()
            state.step += 1
            log.write(_json_line({"kind": "train", **terms.as_record(s)}))
            if (state.step % config.checkpoint_every == 0
                    or state.step == config.total_steps):
                val = validation_loss(state.model, split.val, config, c_g, c_l,
                                      step=state.step)
                if val is not None:
                    log.write(_json_line({"kind": "val", "step": state.step,
                                          "total": val}))
                    if state.best_val is None or val < state.best_val:
                        state.best_val = val
                        save_checkpoint(os.path.join(out_dir, "model_best.ckpt"),
                                        state.model, state.step)
                save_checkpoint(os.path.join(out_dir, "model.ckpt"),
                                state.model, state.step)
                save_train_state(os.path.join(out_dir, "state.ckpt"), state,
                                 variant)
                saved = True
    if not saved:
        save_checkpoint(os.path.join(out_dir, "model.ckpt"), state.model,
                        state.step)
        save_train_state(os.path.join(out_dir, "state.ckpt"), state, variant)
    return state


def train(config: TrainingConfig, split, out_dir, resume=None) -> TrainState:
    """Train the dual-encoder model; writes metrics.jsonl and checkpoints."""
    return _run_training(config, split, out_dir, "dual", resume)


def train_vanilla_baseline(config: TrainingConfig, split, out_dir,
                           resume=None) -> TrainState:
    """Train the single-encoder baseline with the same protocol."""
    return _run_training(config, split, out_dir, "vanilla", resume)
