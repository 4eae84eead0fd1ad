import dataclasses
import json

import numpy as np
import pytest

from askdlab import losses as L
from askdlab.errors import ConfigError, DivergenceError
from askdlab.model import Decoder, ModelSnapshot, student_config
from askdlab.optim import make_optimizer
from askdlab.schedule import EpochPlan, Phase
from askdlab.taskgen import batch_iter
from askdlab.trainer import (Method, TrainConfig, distill, load_teacher, method_plans, pretrain_teacher,
                             run_epoch_akd, run_epoch_ce, run_epoch_skd)


def _student(cfg):
    dec = Decoder(cfg.student)
    return dec, make_optimizer(cfg.optimizer, dec.parameters(), cfg.lr)


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        TrainConfig(method="distill-harder")


def test_config_dict_round_trip_and_hash():
    cfg = TrainConfig(method="akd", seed=3)
    again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.config_hash() == cfg.config_hash()
    assert dataclasses.replace(cfg, checkpoint_dir="/x").config_hash() == cfg.config_hash()
    assert dataclasses.replace(cfg, seed=4).config_hash() != cfg.config_hash()


def test_akd_alpha_zero_reduces_to_ce(tiny, tiny_cfg):
    train, _ = tiny
    teacher = load_teacher(tiny_cfg)
    student, opt = _student(tiny_cfg)
    rep = run_epoch_akd(student, teacher, train, EpochPlan(0, Phase.AKD, 0.0, 0.0), tiny_cfg, opt)
    assert rep.batch_losses
    for b in rep.batch_losses:
        assert b.l_total == b.l_s
        assert b.l_akd == 0.0


def test_akd_identity_and_frozen_teacher(tiny, tiny_cfg):
    train, _ = tiny
    teacher = load_teacher(tiny_cfg)
    before = teacher.flat().copy()
    student, opt = _student(tiny_cfg)
    rep = run_epoch_akd(student, teacher, train, EpochPlan(3, Phase.AKD, 0.9, 0.0), tiny_cfg, opt)
    for b in rep.batch_losses:
        assert abs(b.l_akd / b.l_kl - 0.9) <= 1e-12
        assert abs(b.l_total - (b.l_s + b.l_akd)) <= 1e-12
        assert b.l_skd is None
    assert all(p.grad is None for p in teacher.parameters())
    assert np.array_equal(teacher.flat(), before)


def test_akd_needs_teacher(tiny, tiny_cfg):
    student, opt = _student(tiny_cfg)
    with pytest.raises(ValueError, match="teacher"):
        run_epoch_akd(student, None, tiny[0], EpochPlan(0, Phase.AKD, 1.0, 0.0), tiny_cfg, opt)


def test_akd_rejects_skd_plan(tiny, tiny_cfg):
    student, opt = _student(tiny_cfg)
    with pytest.raises(ValueError):
        run_epoch_akd(student, load_teacher(tiny_cfg), tiny[0], EpochPlan(7, Phase.SKD, 0.5, 0.56), tiny_cfg, opt)


def test_skd_alpha_zero_matches_hard_label_ce(tiny, tiny_cfg):
    train, _ = tiny
    a, opt_a = _student(tiny_cfg)
    b, opt_b = _student(tiny_cfg)
    snap = a.snapshot(4)
    skd = run_epoch_skd(a, snap, train, EpochPlan(5, Phase.SKD, 0.5, 0.0), tiny_cfg, opt_a)
    ce = run_epoch_ce(b, train, EpochPlan(5, Phase.CE, 0.0, 0.0), tiny_cfg, opt_b)
    assert len(skd.batch_losses) == len(ce.batch_losses)
    for x, y in zip(skd.batch_losses, ce.batch_losses):
        assert abs(x.l_skd - y.l_s) <= 1e-12
        assert x.l_total == x.l_skd and x.l_s is None and x.l_akd is None


def test_skd_snapshot_unchanged_and_stale_rejected(tiny, tiny_cfg):
    train, _ = tiny
    student, opt = _student(tiny_cfg)
    snap = student.snapshot(6)
    before = snap.params.copy()
    run_epoch_skd(student, snap, train, EpochPlan(7, Phase.SKD, 0.5, 0.56), tiny_cfg, opt)
    assert np.array_equal(snap.params, before)
    assert not np.array_equal(student.flat(), before)
    with pytest.raises(ValueError, match="stale"):
        run_epoch_skd(student, snap, train, EpochPlan(8, Phase.SKD, 0.4, 0.64), tiny_cfg, opt)


def test_method_plans():
    cfg = TrainConfig().schedule
    askd = method_plans(Method.ASKD, cfg)
    assert [p.phase for p in askd] == [Phase.AKD] * 7 + [Phase.SKD] * 3
    assert askd[7].alpha_skd == pytest.approx(0.56, abs=1e-12)
    akd = method_plans(Method.AKD, cfg)
    assert all(p.phase is Phase.AKD for p in akd)
    assert [p.alpha_akd for p in akd][-1] == pytest.approx(0.3)
    assert {p.alpha_akd for p in method_plans(Method.KD_FIXED, cfg, 0.7)} == {0.7}
    skd = method_plans(Method.SKD_ONLY, cfg)
    assert skd[0].phase is Phase.CE and all(p.phase is Phase.SKD for p in skd[1:])
    assert [p.alpha_skd for p in skd[1:3]] == pytest.approx([0.08, 0.16])
    assert all(p.phase is Phase.CE for p in method_plans(Method.CE_ONLY, cfg))


def test_askd_runs_seven_akd_then_three_skd(tiny, tiny_cfg):
    snap, reports = distill(tiny_cfg, *tiny)
    assert [r.phase for r in reports] == ["AKD"] * 7 + ["SKD"] * 3
    assert reports[7].alpha == pytest.approx(0.56)
    assert [r.alpha for r in reports[:7]] == pytest.approx([1.0, 1.0, 1.0, 0.9, 0.8, 0.7, 0.6])
    assert snap.epoch == 9
    for r in reports:
        assert np.isfinite(r.losses.l_total) and r.val_ter >= 0


def test_skd_teacher_is_previous_epoch_student(tiny, tiny_cfg, monkeypatch):
    """The snapshot used at SKD epoch e reproduces the student as it stood after epoch e-1."""
    import askdlab.trainer as T
    logits_after = {}
    used = {}
    train, val = tiny
    b = next(batch_iter(train.utterances, 4, 0, 0, shuffle=False))
    feats, mask = train.batch_features(b.idx)

    def on_epoch(student, rep):
        logits_after[rep.epoch] = student(b.inputs, feats, mask).data.copy()

    real = T.run_epoch_skd

    def spy(student, prev_snapshot, *a, **k):
        dec = Decoder.from_snapshot(student.cfg, prev_snapshot)
        used[prev_snapshot.epoch] = dec(b.inputs, feats, mask).data.copy()
        return real(student, prev_snapshot, *a, **k)

    monkeypatch.setattr(T, "run_epoch_skd", spy)
    distill(tiny_cfg, train, val, on_epoch=on_epoch)
    assert sorted(used) == [6, 7, 8]
    for e, logits in used.items():
        assert np.array_equal(logits, logits_after[e])


def test_ce_only_never_touches_teacher(tiny, tiny_cfg, tmp_path):
    cfg = dataclasses.replace(tiny_cfg, method=Method.CE_ONLY, teacher_path=str(tmp_path / "missing.snap"))
    cfg = dataclasses.replace(cfg, schedule=dataclasses.replace(cfg.schedule, total_epochs=3, warmup_epochs=1))
    _, reports = distill(cfg, *tiny)
    assert [r.phase for r in reports] == ["CE"] * 3
    assert not (tmp_path / "missing.snap").exists()


def test_distill_is_deterministic(tiny_cfg, tmp_path):
    a = dataclasses.replace(tiny_cfg, checkpoint_dir=str(tmp_path / "a"))
    b = dataclasses.replace(tiny_cfg, checkpoint_dir=str(tmp_path / "b"))
    sa, _ = distill(a)
    sb, _ = distill(b)
    assert sa.to_bytes() == sb.to_bytes()
    assert (tmp_path / "a" / "reports.jsonl").read_bytes() == (tmp_path / "b" / "reports.jsonl").read_bytes()
    ha, hb = (json.loads((tmp_path / d / "config.json").read_text())["hash"] for d in "ab")
    assert ha == hb == tiny_cfg.config_hash()
    for e in range(10):
        assert (tmp_path / "a" / f"epoch_{e}.snap").exists()


class _Stop(Exception):
    pass


@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_resume_matches_uninterrupted(tiny_cfg, tmp_path, optimizer):
    lr = 3e-3 if optimizer == "adam" else 0.1
    full = dataclasses.replace(tiny_cfg, optimizer=optimizer, lr=lr, checkpoint_dir=str(tmp_path / "full"))
    part = dataclasses.replace(full, checkpoint_dir=str(tmp_path / "part"))
    ref, _ = distill(full)

    def stop_after_5(student, rep):
        if rep.epoch == 5:
            raise _Stop

    with pytest.raises(_Stop):
        distill(part, on_epoch=stop_after_5)
    seen = []
    resumed, reports = distill(part, on_epoch=lambda s, r: seen.append(r.epoch))
    assert seen == [6, 7, 8, 9]
    assert [r.epoch for r in reports] == list(range(10))
    assert resumed.to_bytes() == ref.to_bytes()
    assert (tmp_path / "full" / "reports.jsonl").read_bytes() == (tmp_path / "part" / "reports.jsonl").read_bytes()


def test_resume_with_different_config_rejected(tiny_cfg, tmp_path):
    cfg = dataclasses.replace(tiny_cfg, method=Method.CE_ONLY, checkpoint_dir=str(tmp_path / "r"),
                              schedule=dataclasses.replace(tiny_cfg.schedule, total_epochs=3, warmup_epochs=1))
    distill(cfg)
    with pytest.raises(ConfigError, match="hash mismatch"):
        distill(dataclasses.replace(cfg, lr=1e-2))


def test_divergence_is_reported(tiny, tiny_cfg):
    cfg = dataclasses.replace(tiny_cfg, method=Method.CE_ONLY)

    def poison(student, rep):
        student.parameters()[0].data[0, 0] = np.nan

    with pytest.raises(DivergenceError, match="seed=0"):
        distill(cfg, *tiny, on_epoch=poison)


def test_teacher_must_be_larger(tiny, tiny_cfg):
    cfg = dataclasses.replace(tiny_cfg, model_teacher=student_config())
    with pytest.raises(ConfigError, match="more parameters"):
        pretrain_teacher(*tiny, cfg)


def test_pretrain_teacher_deterministic(tiny, tiny_cfg, tmp_path):
    cfg = dataclasses.replace(tiny_cfg, teacher_max_epochs=2)
    a = pretrain_teacher(*tiny, cfg, tmp_path / "a.snap")
    b = pretrain_teacher(*tiny, cfg, tmp_path / "b.snap")
    assert (tmp_path / "a.snap").read_bytes() == (tmp_path / "b.snap").read_bytes()
    assert a.config_hash == cfg.model_teacher.config_hash()
    assert ModelSnapshot.load(tmp_path / "a.snap", cfg.model_teacher.config_hash()).to_bytes() == b.to_bytes()


def test_loss_breakdown_mean_in_reports(tiny, tiny_cfg):
    cfg = dataclasses.replace(tiny_cfg, schedule=dataclasses.replace(tiny_cfg.schedule, total_epochs=3,
                                                                     warmup_epochs=1, lam=0.4))
    _, reports = distill(cfg, *tiny)
    for r in reports:
        assert r.losses.l_total == pytest.approx(np.mean([b.l_total for b in r.batch_losses]), abs=1e-12)
        assert isinstance(r.losses, L.LossBreakdown)
