import json

import numpy as np
import pytest

from songdisc.data import MelSpectrogram, split_by_individual
from songdisc.errors import TrainingDiverged, ValidationError
from songdisc.model import (ModelHyper, get_flat_params, load_checkpoint,
                            zero_grads)
from songdisc.objective import LossWeights
from songdisc.synth import desk_specs, generate_synthetic_corpus
from songdisc.trainer import (Adam, TrainingConfig, assemble_batch,
                              clip_gradients, config_for_preset, desk_config,
                              dual_step, fresh_train_state, load_train_state,
                              paper_config, train, train_vanilla_baseline,
                              validation_loss)


def tiny_corpus(seed=0, instances=6):
    specs = [desk_specs()[i] for i in (0, 2, 3, 7)]
    return generate_synthetic_corpus(specs, seed=seed,
                                     instances_per_spec=instances)


def tiny_split(seed=0):
    return split_by_individual(tiny_corpus(seed), fractions=(0.5, 0.25, 0.25),
                               seed=seed)


def tiny_config(**kw):
    base = dict(model=ModelHyper(n_mels=80, width=8, d_g=3, d_l=3, heads=2),
                batch_size=4, total_steps=6, learning_rate=1e-3,
                weights=LossWeights(gamma_g=5.0, gamma_l=2.0),
                c_g_max=0.2, c_l_max=2.0, ramp_steps=4, seed=5,
                checkpoint_every=3, scale_preset="desk")
    base.update(kw)
    return TrainingConfig(**base)


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh]


class TestPresets:
    def test_paper_preset_values(self):
        cfg = paper_config()
        assert cfg.batch_size == 64
        assert cfg.total_steps == 200000
        assert cfg.learning_rate == 1e-4
        assert (cfg.c_g_max, cfg.c_l_max, cfg.ramp_steps) == (0.4, 100.0, 20000)
        assert cfg.weights == LossWeights(gamma_g=100.0, gamma_l=10.0)
        assert cfg.model == ModelHyper(80, 256, 128, 128, 4)

    def test_desk_preset_overrides(self):
        cfg = desk_config()
        assert cfg.model.d_g == 16 and cfg.model.d_l == 16
        assert cfg.total_steps == 5000
        assert cfg.batch_size == 32

    def test_unknown_preset_rejected(self):
        with pytest.raises(ValidationError):
            config_for_preset("garage")


class TestAdam:
    def test_matches_hand_computed_first_step(self):
        from songdisc.nn import Param
        p = Param(np.array([1.0, 2.0]))
        p.grad[:] = [0.5, -1.0]
        opt = Adam([("p", p)], lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        opt.step()
        # first-step bias correction makes the update lr * g/(|g| + eps)-ish
        expect = np.array([1.0, 2.0]) - 0.1 * np.array([0.5, -1.0]) / (
            np.abs([0.5, -1.0]) + 1e-8)
        assert np.allclose(p.value, expect, atol=1e-9)

    def test_clip_gradients(self):
        from songdisc.nn import Param
        p = Param(np.zeros(4))
        p.grad[:] = [3.0, 4.0, 0.0, 0.0]
        norm = clip_gradients(type("M", (), {"named_params": lambda self: [("p", p)]})(), 2.5)
        assert norm == 5.0
        assert np.allclose(p.grad, [1.5, 2.0, 0.0, 0.0])


def test_zero_steps_leaves_params_at_init(tmp_path):
    cfg = tiny_config(total_steps=0)
    split = tiny_split()
    state = train(cfg, split, tmp_path)
    init = fresh_train_state(cfg, "dual")
    assert np.array_equal(get_flat_params(state.model),
                          get_flat_params(init.model))
    model, step = load_checkpoint(tmp_path / "model.ckpt")
    assert step == 0


def test_capacity_annealing_logged_exactly(tmp_path):
    cfg = tiny_config(total_steps=6, ramp_steps=4, c_l_max=2.0, c_g_max=0.2)
    train(cfg, tiny_split(), tmp_path)
    records = [r for r in read_log(tmp_path / "metrics.jsonl")
               if r["kind"] == "train"]
    by_step = {r["step"]: r for r in records}
    assert by_step[0]["c_l_active"] == 0.0
    assert by_step[2]["c_l_active"] == 1.0
    assert by_step[4]["c_l_active"] == 2.0
    assert by_step[0]["c_g_active"] == 0.0
    assert by_step[2]["c_g_active"] == 0.1
    assert by_step[4]["c_g_active"] == 0.2


def test_metrics_log_fields_and_identity(tmp_path):
    cfg = tiny_config(total_steps=3)
    train(cfg, tiny_split(), tmp_path)
    records = read_log(tmp_path / "metrics.jsonl")
    train_recs = [r for r in records if r["kind"] == "train"]
    assert len(train_recs) == 3
    for r in train_recs:
        assert set(r) == {"kind", "step", "recon_nll", "kl_global", "kl_local",
                          "c_g_active", "c_l_active", "total"}
        expect = (r["recon_nll"]
                  + cfg.weights.gamma_g * abs(r["kl_global"] - r["c_g_active"])
                  + cfg.weights.gamma_l * abs(r["kl_local"] - r["c_l_active"]))
        assert np.isclose(r["total"], expect, rtol=1e-12)
    assert any(r["kind"] == "val" for r in records)


def test_runs_are_byte_identical(tmp_path):
    cfg = tiny_config(total_steps=5)
    split = tiny_split()
    train(cfg, split, tmp_path / "a")
    train(cfg, split, tmp_path / "b")
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert a == b


def test_resume_is_bit_equal(tmp_path):
    split = tiny_split()
    cfg_full = tiny_config(total_steps=8, checkpoint_every=4)
    train(cfg_full, split, tmp_path / "full")

    cfg_half = tiny_config(total_steps=4, checkpoint_every=4)
    train(cfg_half, split, tmp_path / "part")
    train(cfg_full, split, tmp_path / "part",
          resume=tmp_path / "part" / "state.ckpt")

    full_log = (tmp_path / "full" / "metrics.jsonl").read_bytes()
    part_log = (tmp_path / "part" / "metrics.jsonl").read_bytes()
    assert full_log == part_log

    a = load_train_state(tmp_path / "full" / "state.ckpt", cfg_full)
    b = load_train_state(tmp_path / "part" / "state.ckpt", cfg_full)
    assert a.step == b.step == 8
    assert np.array_equal(get_flat_params(a.model), get_flat_params(b.model))
    for (n, _), (n2, _) in zip(a.opt.named_params, b.opt.named_params):
        assert n == n2
        assert np.array_equal(a.opt.m[n], b.opt.m[n])
        assert np.array_equal(a.opt.v[n], b.opt.v[n])
    assert a.rng.bit_generator.state == b.rng.bit_generator.state


def test_resume_wrong_variant_rejected(tmp_path):
    split = tiny_split()
    cfg = tiny_config(total_steps=2, checkpoint_every=2)
    train_vanilla_baseline(cfg, split, tmp_path / "v")
    with pytest.raises(ValidationError):
        train(cfg, split, tmp_path / "d",
              resume=tmp_path / "v" / "state.ckpt")


def test_padded_frames_never_reach_gradients(tmp_path):
    cfg = tiny_config()
    state = fresh_train_state(cfg, "dual")
    rng = np.random.default_rng(3)
    songs = tiny_corpus(instances=2)[:4]
    batch = assemble_batch(songs, np.random.default_rng(8), cfg.model,
                           shuffled=True)
    x, x_shuf, lengths, eps_g, eps_l = batch
    assert len(set(lengths)) > 1  # the batch genuinely has padding

    zero_grads(state.model)
    t0 = dual_step(state.model, batch, cfg.weights, 0.1, 1.0,
                   update_stats=False)
    g0 = [p.grad.copy() for _, p in state.model.named_params()]

    x2, xs2 = x.copy(), x_shuf.copy()
    for i, L in enumerate(lengths):
        x2[i, :, L:] = rng.uniform(5, 9, x2[i, :, L:].shape)
        xs2[i, :, L:] = rng.uniform(-4, -1, xs2[i, :, L:].shape)
    zero_grads(state.model)
    t1 = dual_step(state.model, (x2, xs2, lengths, eps_g, eps_l),
                   cfg.weights, 0.1, 1.0, update_stats=False)
    assert t1.total == t0.total
    assert t1.recon_nll == t0.recon_nll
    for g, (_, p) in zip(g0, state.model.named_params()):
        assert np.array_equal(g, p.grad)


def test_loss_decreases_on_tiny_run(tmp_path):
    cfg = tiny_config(total_steps=40, learning_rate=3e-3, checkpoint_every=40,
                      c_g_max=0.1, c_l_max=1.0, ramp_steps=10)
    train(cfg, tiny_split(), tmp_path)
    totals = [r["total"] for r in read_log(tmp_path / "metrics.jsonl")
              if r["kind"] == "train"]
    assert np.median(totals[-10:]) < np.median(totals[:10])


def test_divergence_aborts_with_record(tmp_path):
    split = tiny_split()
    bad = MelSpectrogram(np.full((80, 120), np.inf), "bad",
                         split.train[0].individual_id, "t")
    split.train.insert(0, bad)
    cfg = tiny_config(total_steps=50, batch_size=len(split.train))
    with pytest.raises(TrainingDiverged):
        train(cfg, split, tmp_path)
    records = read_log(tmp_path / "metrics.jsonl")
    assert records[-1]["kind"] == "abort"
    assert records[-1]["step"] == 0


def test_vanilla_latent_is_single_vector(tmp_path):
    cfg = tiny_config(total_steps=2, checkpoint_every=2)
    state = train_vanilla_baseline(cfg, tiny_split(), tmp_path)
    songs = tiny_corpus(instances=2)[:3]
    batch = assemble_batch(songs, np.random.default_rng(0), state.model.hyper,
                           shuffled=False)
    x, lengths, eps = batch
    out = state.model.forward(x, lengths, eps, training=False)
    assert out["q"].mean.shape == (3, cfg.model.d_l)
    assert out["z"].shape == (3, cfg.model.d_l)


def test_vanilla_runs_deterministic(tmp_path):
    cfg = tiny_config(total_steps=4)
    split = tiny_split()
    train_vanilla_baseline(cfg, split, tmp_path / "a")
    train_vanilla_baseline(cfg, split, tmp_path / "b")
    assert ((tmp_path / "a" / "metrics.jsonl").read_bytes()
            == (tmp_path / "b" / "metrics.jsonl").read_bytes())


def test_empty_train_split_rejected(tmp_path):
    split = tiny_split()
    split.train.clear()
    with pytest.raises(ValidationError):
        train(tiny_config(), split, tmp_path)


def test_params_report_written(tmp_path):
    cfg = tiny_config(total_steps=1, checkpoint_every=1)
    state = train(cfg, tiny_split(), tmp_path)
    counts = json.loads((tmp_path / "params.json").read_text())
    assert counts["total"] == sum(p.value.size
                                  for _, p in state.model.named_params())
    assert counts["local_encoder"] < counts["global_encoder"]


def test_validation_loss_deterministic():
    cfg = tiny_config()
    split = tiny_split()
    state = fresh_train_state(cfg, "dual")
    a = validation_loss(state.model, split.val, cfg, 0.1, 1.0, step=7)
    b = validation_loss(state.model, split.val, cfg, 0.1, 1.0, step=7)
    assert a == b
    c = validation_loss(state.model, split.val, cfg, 0.1, 1.0, step=8)
    assert a != c  # a different step draws different noise
    assert validation_loss(state.model, [], cfg, 0.1, 1.0, step=7) is None
