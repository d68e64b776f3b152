"""Two-phase trainer: losses, batch assembly, checkpoints, determinism."""
import math

import numpy as np
import pytest
import torch

from asymmam import config as cfgmod
from asymmam import selfadv
from asymmam.asyc import AsycModel
from asymmam.asyd import UNetDecoder
from asymmam.errors import ConfigError, DataError, ShapeError, TrainingAbort
from asymmam.selfadv import (LossWeights, PairDataset, Trainer, assemble_items,
                             bce_logits, build_tumor_set, collate,
                             copy_discriminator, derive_seed, epoch_batches,
                             finite_difference_audit, load_checkpoint,
                             loss_cls, loss_dics, loss_rec, loss_syn,
                             phase1_losses, predict_scores, validate_aucs)

from conftest import TINY, make_phantom, tiny_config


def states_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return set(sa) == set(sb) and all(torch.equal(sa[k], sb[k]) for k in sa)


# ---------------------------------------------------------------------------
# Loss weights and primitive losses
# ---------------------------------------------------------------------------

def test_loss_weights_defaults():
    w = LossWeights()
    assert (w.lambda_diag, w.lambda_rec, w.lambda_dics, w.lambda_syn) == (1.0, 0.1, 1.0, 0.5)


@pytest.mark.parametrize("kwargs", [
    dict(lambda_diag=-1.0), dict(lambda_rec=-0.01),
    dict(lambda_dics=-5.0), dict(lambda_syn=-0.5),
])
def test_loss_weights_reject_negative(kwargs):
    with pytest.raises(ConfigError):
        LossWeights(**kwargs)


def test_classification_loss_zero_logits_is_three_log_two():
    z = torch.zeros(4)
    y = torch.tensor([0.0, 1.0, 1.0, 0.0])
    val = float(loss_cls(z, z, z, y, y, y))
    assert val == pytest.approx(3.0 * math.log(2.0), abs=1e-6)
    assert val == pytest.approx(2.0794415416798357, abs=1e-6)


def test_classification_loss_rejects_nonbinary():
    z = torch.zeros(2)
    with pytest.raises(DataError):
        loss_cls(z, z, z, torch.tensor([0.0, 2.0]), torch.zeros(2), torch.zeros(2))
    with pytest.raises(DataError):
        loss_cls(z, z, z, torch.zeros(2), torch.tensor([0.5, 0.0]), torch.zeros(2))


def test_clamped_bce_finite_and_saturates():
    huge = torch.tensor([1e9])
    assert torch.isfinite(bce_logits(huge, torch.zeros(1)))
    # beyond the clamp the loss is exactly the boundary value
    assert float(bce_logits(huge, torch.ones(1))) == float(
        bce_logits(torch.tensor([15.0]), torch.ones(1)))
    # and the gradient through a clamped logit vanishes
    l = torch.tensor([20.0], requires_grad=True)
    bce_logits(l, torch.zeros(1)).backward()
    assert float(l.grad) == 0.0


def test_reconstruction_loss_worked_example():
    shape = (2, 4, 4)
    x = torch.full(shape, 0.8)
    x_n = torch.full(shape, 0.6)
    x_ab = torch.full(shape, 0.1)
    cam = torch.full(shape, 0.5)
    # |0.5*0.8 - 0.5*0.6| + |0.5*0.8 - 0.1| = 0.1 + 0.3
    assert float(loss_rec(x, x_n, x_ab, cam)) == pytest.approx(0.4, abs=1e-6)


def test_reconstruction_loss_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        loss_rec(torch.zeros(2, 4, 4), torch.zeros(2, 4, 4),
                 torch.zeros(2, 4, 4), torch.zeros(2, 4, 5))


# ---------------------------------------------------------------------------
# Frozen discriminator
# ---------------------------------------------------------------------------

def test_copy_discriminator_exact_frozen_eval(tiny_model):
    disc = copy_discriminator(tiny_model)
    assert states_equal(disc, tiny_model)
    assert not disc.training
    assert all(not p.requires_grad for p in disc.parameters())


def test_copy_discriminator_independent_of_source(tiny_model):
    disc = copy_discriminator(tiny_model)
    before = {k: v.clone() for k, v in disc.state_dict().items()}
    with torch.no_grad():
        for p in tiny_model.parameters():
            p.add_(1.0)
    assert all(torch.equal(before[k], v) for k, v in disc.state_dict().items())


def test_copy_discriminator_into_reuses_module(tiny_model):
    disc = copy_discriminator(tiny_model)
    with torch.no_grad():
        next(tiny_model.parameters()).add_(0.5)
    out = copy_discriminator(tiny_model, into=disc)
    assert out is disc
    assert states_equal(disc, tiny_model)


def test_symmetry_loss_matches_manual_zero_target(tiny_model):
    disc = copy_discriminator(tiny_model)
    torch.manual_seed(3)
    x_n_r = torch.rand(2, TINY["image_h"], TINY["image_w"])
    x_n_l = torch.rand(2, TINY["image_h"], TINY["image_w"])
    got = loss_dics(disc, x_n_r, x_n_l)
    out = disc(x_n_r.unsqueeze(1), x_n_l.unsqueeze(1))
    zeros = torch.zeros(2)
    want = loss_cls(out.logit_asy, out.logit_r, out.logit_l, zeros, zeros, zeros)
    assert torch.equal(got, want)


def test_symmetry_loss_gradients_reach_inputs_only(tiny_model):
    disc = copy_discriminator(tiny_model)
    x_n_r = torch.rand(1, TINY["image_h"], TINY["image_w"], requires_grad=True)
    x_n_l = torch.rand(1, TINY["image_h"], TINY["image_w"], requires_grad=True)
    loss_dics(disc, x_n_r, x_n_l).backward()
    assert x_n_r.grad is not None and x_n_r.grad.abs().sum() > 0
    assert all(p.grad is None for p in disc.parameters())


# ---------------------------------------------------------------------------
# Synthesis supervision
# ---------------------------------------------------------------------------

def _manual_batch(h=2, w=2):
    mk = lambda v: torch.full((h, w), v)
    return selfadv.TrainBatch(
        x_r=torch.zeros(3, 1, h, w), x_l=torch.zeros(3, 1, h, w),
        y_r=torch.zeros(3), y_l=torch.zeros(3), y_asy=torch.zeros(3),
        real_r=torch.stack([mk(0.25), torch.zeros(h, w), mk(0.75)]),
        real_l=torch.stack([torch.zeros(h, w), torch.zeros(h, w), mk(0.15)]),
        syn_r=torch.tensor([True, False, True]),
        syn_l=torch.tensor([False, False, True]))


def test_synthesis_loss_sums_over_flagged_sides():
    batch = _manual_batch()
    x_n_r = torch.full((3, 2, 2), 0.5)
    x_n_l = torch.full((3, 2, 2), 0.4)
    # right: |0.5-0.25| + |0.5-0.75| = 0.5; left: |0.4-0.15| = 0.25
    assert float(loss_syn(x_n_r, x_n_l, batch)) == pytest.approx(0.75, abs=1e-6)


def test_synthesis_loss_zero_without_flags():
    batch = _manual_batch()
    batch.syn_r = torch.zeros(3, dtype=torch.bool)
    batch.syn_l = torch.zeros(3, dtype=torch.bool)
    assert float(loss_syn(torch.rand(3, 2, 2), torch.rand(3, 2, 2), batch)) == 0.0


def test_synthesis_loss_scales_with_flag_count():
    batch = _manual_batch()
    x_n_r = torch.full((3, 2, 2), 0.5)
    x_n_l = torch.full((3, 2, 2), 0.4)
    both = float(loss_syn(x_n_r, x_n_l, batch))
    batch.syn_l = torch.zeros(3, dtype=torch.bool)
    right_only = float(loss_syn(x_n_r, x_n_l, batch))
    assert both == pytest.approx(right_only + 0.25, abs=1e-6)


# ---------------------------------------------------------------------------
# Collation
# ---------------------------------------------------------------------------

def test_collate_shapes_and_flags():
    pairs = [make_phantom(i) for i in range(3)]
    batch = collate([(p, False, False) for p in pairs])
    assert batch.x_r.shape == (3, 1, 16, 8)
    assert batch.x_l.shape == (3, 1, 16, 8)
    assert batch.size == 3
    assert batch.y_r.tolist() == [p.y_r for p in pairs]
    assert batch.y_asy.tolist() == [p.y_asy for p in pairs]
    assert batch.syn_r.dtype == torch.bool
    assert torch.all(batch.real_r == 0) and torch.all(batch.real_l == 0)
    assert batch.pair_ids == [p.pair_id for p in pairs]


def test_collate_rejects_empty():
    with pytest.raises(DataError):
        collate([])


def test_collate_rejects_mixed_sizes():
    a = make_phantom(0)
    b = make_phantom(1, h=32, w=16)
    with pytest.raises(DataError):
        collate([(a, False, False), (b, False, False)])


def test_collate_rejects_flag_without_preinsertion():
    for seed in range(20):
        pair = make_phantom(seed)
        if pair.y_r == 0:
            break
    assert pair.real_right is None
    with pytest.raises(DataError):
        collate([(pair, True, False)])


def test_collate_keeps_preinsertion_for_flagged_sides():
    for seed in range(20):
        pair = make_phantom(seed)
        if pair.y_r == 1:
            break
    batch = collate([(pair, True, False)])
    assert np.allclose(batch.real_r[0].numpy(), pair.real_right)
    assert torch.all(batch.real_l == 0)


# ---------------------------------------------------------------------------
# Deterministic batching and assembly
# ---------------------------------------------------------------------------

def test_derive_seed_matches_seed_sequence_oracle():
    want = int(np.random.SeedSequence((5, 3, 2)).generate_state(1)[0])
    assert derive_seed(5, 3, 2) == want
    assert derive_seed(5, 3, 2) == derive_seed(5, 3, 2)
    assert derive_seed(5, 3, 2) != derive_seed(5, 3, 3)


def test_epoch_batches_partition_and_determinism():
    got = list(epoch_batches(10, 3, seed=9, epoch=0))
    assert [step for step, _ in got] == [0, 1, 2, 3]
    assert [len(ix) for _, ix in got] == [3, 3, 3, 1]
    flat = np.concatenate([ix for _, ix in got])
    assert sorted(flat.tolist()) == list(range(10))
    again = list(epoch_batches(10, 3, seed=9, epoch=0))
    assert all(np.array_equal(a[1], b[1]) for a, b in zip(got, again))
    other = np.concatenate([ix for _, ix in epoch_batches(10, 3, seed=9, epoch=1)])
    assert not np.array_equal(flat, other)


def _run_config(tmp_path, manifest, **overrides):
    cfg = cfgmod.RunConfig()
    cfg.train_manifest = str(manifest)
    cfg.image_h, cfg.image_w = 32, 16
    cfg.embed_dim, cfg.num_heads, cfg.num_blocks = 8, 2, 1
    cfg.encoder_stem_pool = False
    cfg.encoder_stage_strides = "1,2,2,1"
    cfg.batch_size = 4
    cfg.epochs = 2
    cfg.lr = 1e-3
    cfg.tumor_size_lo, cfg.tumor_size_hi = 4, 6
    cfg.seed = 11
    for k, v in overrides.items():
        setattr(cfg, k, v)
    cfg.validate()
    return cfg


def test_assemble_items_deterministic_per_coordinates(phantom_dataset, tmp_path):
    cfg = _run_config(tmp_path, phantom_dataset["train"])
    ds = PairDataset(cfg.train_manifest, 32, 16)
    tumors = build_tumor_set(cfg)
    a = assemble_items(ds, [0, 1, 2], cfg, epoch=0, step=0, tumor_set=tumors)
    b = assemble_items(ds, [0, 1, 2], cfg, epoch=0, step=0, tumor_set=tumors)
    for (pa, ra, la), (pb, rb, lb) in zip(a, b):
        assert np.array_equal(pa.right.pixels, pb.right.pixels)
        assert np.array_equal(pa.left.pixels, pb.left.pixels)
        assert (ra, la) == (rb, lb)
    c = assemble_items(ds, [0, 1, 2], cfg, epoch=0, step=1, tumor_set=tumors)
    assert any(not np.array_equal(pa.right.pixels, pc.right.pixels)
               for (pa, _, _), (pc, _, _) in zip(a, c))


def test_assemble_items_synthesizes_only_symmetric_pairs(phantom_dataset, tmp_path):
    cfg = _run_config(tmp_path, phantom_dataset["train"], synth_fraction=1.0)
    ds = PairDataset(cfg.train_manifest, 32, 16)
    tumors = build_tumor_set(cfg)
    items = assemble_items(ds, list(range(len(ds))), cfg, 0, 0, tumors)
    originals = [ds.get(i) for i in range(len(ds))]
    for orig, (pair, syn_r, syn_l) in zip(originals, items):
        if orig.y_asy == 0:
            assert syn_r or syn_l
            assert pair.y_asy == 1
            if syn_r:
                assert pair.real_right is not None
            if syn_l:
                assert pair.real_left is not None
        else:
            assert not syn_r and not syn_l


# ---------------------------------------------------------------------------
# Phase-1 losses and finiteness guard
# ---------------------------------------------------------------------------

def test_phase1_losses_keys_and_decomposition(tiny_model, tiny_decoder, tiny_batch):
    disc = copy_discriminator(tiny_model)
    w = LossWeights()
    out = phase1_losses(tiny_model, tiny_decoder, disc, tiny_batch, w)
    assert set(out) == {"loss", "loss_diag", "loss_rec", "loss_dics", "loss_syn",
                        "x_n_r", "x_n_l", "x_ab_r", "x_ab_l"}
    total = (w.lambda_diag * out["loss_diag"] + w.lambda_rec * out["loss_rec"]
             + w.lambda_dics * out["loss_dics"] + w.lambda_syn * out["loss_syn"])
    assert abs(float(out["loss"]) - float(total)) <= 1e-6


def test_check_finite_names_offending_component():
    good = {"loss": torch.tensor(1.0)}
    selfadv._check_finite(good)
    with pytest.raises(TrainingAbort, match="loss_rec"):
        selfadv._check_finite({"loss": torch.tensor(1.0),
                               "loss_rec": torch.tensor(float("nan"))})


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

def make_trainer(weights=None, lr=1e-3, **kw):
    torch.manual_seed(0)
    model = AsycModel(tiny_config())
    torch.manual_seed(1)
    decoder = UNetDecoder(model.cfg)
    return Trainer(model, decoder, weights=weights, lr=lr, **kw)


def test_trainer_lr_schedule():
    tr = make_trainer(lr=1e-3, lr_decay=0.1, decay_epochs=2)
    assert tr.lr_at(0) == pytest.approx(1e-3)
    assert tr.lr_at(1) == pytest.approx(1e-3)
    assert tr.lr_at(2) == pytest.approx(1e-4)
    assert tr.lr_at(5) == pytest.approx(1e-5)
    tr.set_epoch(2)
    for group in tr.opt_asyc.param_groups + tr.opt_g.param_groups:
        assert group["lr"] == pytest.approx(1e-4)


def test_phase_separation_of_updates(tiny_batch):
    tr = make_trainer()
    model_before = {k: v.clone() for k, v in tr.model.state_dict().items()}
    dec_before = {k: v.clone() for k, v in tr.decoder.state_dict().items()}
    p1 = tr.phase1(tiny_batch)
    assert any(not torch.equal(model_before[k], v)
               for k, v in tr.model.state_dict().items())
    assert any(not torch.equal(dec_before[k], v)
               for k, v in tr.decoder.state_dict().items())

    dec_mid = {k: v.clone() for k, v in tr.decoder.state_dict().items()}
    model_mid = {k: v.clone() for k, v in tr.model.state_dict().items()}
    tr.phase2(tiny_batch, p1["x_n_r"], p1["x_n_l"])
    assert all(torch.equal(dec_mid[k], v) for k, v in tr.decoder.state_dict().items())
    assert any(not torch.equal(model_mid[k], v)
               for k, v in tr.model.state_dict().items())


def test_refine_skipped_when_generator_untrained(tiny_batch):
    tr = make_trainer(weights=LossWeights(1.0, 0.0, 0.0, 0.0))
    # parameters only: normalization buffers still update in the forward pass
    dec_before = {k: v.clone() for k, v in tr.decoder.named_parameters()}
    rec = tr.train_step(tiny_batch)
    assert rec["loss_refine"] == 0.0
    assert all(torch.equal(dec_before[k], v) for k, v in tr.decoder.named_parameters())

    tr2 = make_trainer()
    rec2 = tr2.train_step(tiny_batch)
    assert rec2["loss_refine"] > 0.0


def test_train_step_record_and_counter(tiny_batch):
    tr = make_trainer()
    rec = tr.train_step(tiny_batch)
    assert set(rec) == {"loss", "loss_diag", "loss_rec", "loss_dics", "loss_syn",
                        "loss_refine", "step", "epoch"}
    assert rec["step"] == 1
    assert tr.train_step(tiny_batch)["step"] == 2
    assert all(isinstance(rec[k], float) for k in
               ("loss", "loss_diag", "loss_rec", "loss_dics", "loss_syn", "loss_refine"))


def test_trainer_discriminator_reused_and_refreshed(tiny_batch):
    tr = make_trainer()
    disc_id = id(tr.disc)
    tr.train_step(tiny_batch)
    assert id(tr.disc) == disc_id
    assert all(not p.requires_grad for p in tr.disc.parameters())


def test_grad_clip_zero_disables_clipping(tiny_batch):
    tr = make_trainer(grad_clip=0.0)
    tr.train_step(tiny_batch)  # must not raise
    assert Trainer(AsycModel(tiny_config()), UNetDecoder(tiny_config())).grad_clip == 1.0


# ---------------------------------------------------------------------------
# Checkpointing and resume
# ---------------------------------------------------------------------------

def _tiny_run_config():
    cfg = cfgmod.RunConfig()
    cfg.image_h, cfg.image_w = TINY["image_h"], TINY["image_w"]
    cfg.embed_dim, cfg.num_heads, cfg.num_blocks = 8, 2, 1
    cfg.encoder_stem_pool = False
    cfg.encoder_stage_strides = "1,2,2,1"
    return cfg


def test_checkpoint_round_trip(tmp_path, tiny_batch):
    tr = make_trainer()
    tr.train_step(tiny_batch)
    path = tmp_path / "ck.pt"
    tr.save(path, _tiny_run_config(), best_val_auc=0.75)
    model, decoder, run_cfg, blob = load_checkpoint(path)
    assert states_equal(model, tr.model)
    assert states_equal(decoder, tr.decoder)
    assert run_cfg.embed_dim == 8 and run_cfg.image_h == TINY["image_h"]
    assert blob["step"] == 1 and blob["best_val_auc"] == 0.75


def test_checkpoint_rejects_bad_version(tmp_path):
    path = tmp_path / "bad.pt"
    torch.save({"format_version": 99}, path)
    with pytest.raises(DataError):
        load_checkpoint(path)
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.pt")


def _loop_epoch(trainer, ds, cfg, tumors, epoch):
    trainer.set_epoch(epoch)
    for step, indices in epoch_batches(len(ds), cfg.batch_size, cfg.seed, epoch):
        items = assemble_items(ds, indices, cfg, epoch, step, tumors)
        trainer.train_step(collate(items))


def test_resume_is_bit_exact(phantom_dataset, tmp_path):
    cfg = _run_config(tmp_path, phantom_dataset["train"])
    ds = PairDataset(cfg.train_manifest, cfg.image_h, cfg.image_w)
    tumors = build_tumor_set(cfg)

    def fresh_trainer():
        torch.manual_seed(derive_seed(cfg.seed, 0x1217))
        model = AsycModel(cfgmod.asyc_config(cfg))
        decoder = UNetDecoder(model.cfg)
        return Trainer(model, decoder, lr=cfg.lr, lr_decay=cfg.lr_decay,
                       decay_epochs=cfg.decay_epochs, grad_clip=cfg.grad_clip)

    straight = fresh_trainer()
    _loop_epoch(straight, ds, cfg, tumors, 0)
    _loop_epoch(straight, ds, cfg, tumors, 1)

    broken = fresh_trainer()
    _loop_epoch(broken, ds, cfg, tumors, 0)
    path = tmp_path / "mid.pt"
    broken.save(path, cfg)

    model, decoder, _, blob = load_checkpoint(path)
    resumed = Trainer(model, decoder, lr=cfg.lr, lr_decay=cfg.lr_decay,
                      decay_epochs=cfg.decay_epochs, grad_clip=cfg.grad_clip)
    resumed.load_training_state(blob)
    _loop_epoch(resumed, ds, cfg, tumors, 1)

    assert states_equal(straight.model, resumed.model)
    assert states_equal(straight.decoder, resumed.decoder)
    assert straight.step_count == resumed.step_count


# ---------------------------------------------------------------------------
# Tumor-set construction rules
# ---------------------------------------------------------------------------

def test_build_tumor_set_disabled_without_synthesis(phantom_dataset, tmp_path):
    cfg = _run_config(tmp_path, phantom_dataset["train"], synth_fraction=0.0)
    assert build_tumor_set(cfg) is None


def test_build_tumor_set_respects_knobs(phantom_dataset, tmp_path):
    cfg = _run_config(tmp_path, phantom_dataset["train"],
                      tumor_count=5, tumor_size_lo=4, tumor_size_hi=5)
    ts = build_tumor_set(cfg)
    assert len(ts) == 5
    assert ts.origin_dataset == "procedural"
    for patch in ts.patches:
        assert max(patch.patch.shape) <= 5 + 2  # small patches from small sizes


def test_build_tumor_set_rejects_origin_clash(phantom_dataset, tmp_path):
    cfg = _run_config(tmp_path, phantom_dataset["train"])
    cfg.train_dataset = "phantoms"
    cfg.tumor_set_origin = "phantoms"
    with pytest.raises(ConfigError):
        cfg.validate()
    with pytest.raises(ConfigError):
        build_tumor_set(cfg)


def test_build_tumor_set_deterministic_per_seed(phantom_dataset, tmp_path):
    cfg = _run_config(tmp_path, phantom_dataset["train"])
    a, b = build_tumor_set(cfg), build_tumor_set(cfg)
    assert len(a) == len(b)
    assert all(np.array_equal(pa.patch, pb.patch)
               for pa, pb in zip(a.patches, b.patches))


# ---------------------------------------------------------------------------
# Prediction helpers and the full fit loop
# ---------------------------------------------------------------------------

def test_predict_scores_lengths(phantom_dataset):
    model = AsycModel(tiny_config(image_h=32, image_w=16))
    ds = PairDataset(phantom_dataset["train"], 32, 16)
    ss, sl, as_, al = predict_scores(model, ds, batch_size=3)
    assert len(ss) == len(sl) == 2 * len(ds)
    assert len(as_) == len(al) == len(ds)
    assert all(0.0 <= s <= 1.0 for s in ss + as_)
    aucs = validate_aucs(model, ds)
    for a in aucs:
        assert a is None or 0.0 <= a <= 1.0


def test_fit_writes_artifacts(phantom_dataset, tmp_path):
    cfg = _run_config(tmp_path, phantom_dataset["train"],
                      val_manifest=str(phantom_dataset["val"]))
    run_dir = tmp_path / "run"
    info = selfadv.fit(cfg, run_dir)
    for name in ("config.cfg", "metrics.csv", "val_metrics.csv",
                 "last.pt", "loss_curve.png"):
        assert (run_dir / name).exists(), name
    # best.pt appears only once a validation AUC is defined; either way the
    # summary points at an existing checkpoint
    assert info["best_checkpoint"].exists()
    assert info["last_checkpoint"].exists()
    import csv as _csv
    rows = list(_csv.DictReader(open(run_dir / "metrics.csv")))
    assert len(rows) == info["steps"] == cfg.epochs * 2  # 8 pairs / batch 4
    assert set(rows[0]) == set(selfadv.METRIC_FIELDS)
    model, decoder, run_cfg, _ = load_checkpoint(info["last_checkpoint"])
    assert run_cfg.batch_size == cfg.batch_size


def test_fit_requires_existing_manifest(tmp_path):
    cfg = _run_config(tmp_path, tmp_path / "nope.csv")
    with pytest.raises(ConfigError):
        selfadv.fit(cfg, tmp_path / "run")


# ---------------------------------------------------------------------------
# Gradient audit (fast spot check; the acceptance suite runs the full one)
# ---------------------------------------------------------------------------

def test_finite_difference_audit_small_sample():
    torch.manual_seed(0)
    model = AsycModel(tiny_config()).to(torch.float64)
    torch.manual_seed(1)
    decoder = UNetDecoder(model.cfg).to(torch.float64)
    pairs = [make_phantom(i) for i in range(2)]
    batch = collate([(p, False, False) for p in pairs], dtype=torch.float64)
    max_rel, records = finite_difference_audit(model, decoder, batch, n_samples=10, seed=4)
    assert len(records) == 10
    assert max_rel < 1e-3
