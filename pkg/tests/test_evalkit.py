import csv
import dataclasses
import io
import statistics

import numpy as np
import pytest

from askdlab.evalkit import greedy_decode, greedy_decode_features
from askdlab.evalkit.experiments import (FIXED, bench_latency, compare_methods, evaluate, latency_csv,
                                         sweep_alpha_min)
from askdlab.model import Decoder, student_config
from askdlab.optim import Adam
from askdlab.schedule import EpochPlan, Phase
from askdlab.trainer import TrainConfig, run_epoch_ce


@pytest.fixture(scope="module")
def overfit(tiny):
    """A student trained to memorise four utterances."""
    train = tiny[0].head(4)
    cfg = TrainConfig(batch_size=4, seed=5)
    dec = Decoder(cfg.student)
    opt = Adam(dec.parameters(), 1e-2)
    for e in range(150):
        rep = run_epoch_ce(dec, train, EpochPlan(e, Phase.CE, 0.0, 0.0), cfg, opt)
    return dec, train, rep.losses.l_total


def test_overfit_model_decodes_its_targets(overfit, encoder):
    dec, train, loss = overfit
    assert loss < 0.05
    for u in train.utterances:
        assert greedy_decode(dec, encoder, u.frames) == u.tokens[1:-1]


def test_decode_is_deterministic(tiny, encoder):
    dec = Decoder(student_config(seed=2))
    frames = tiny[1].utterances[0].frames
    assert greedy_decode(dec, encoder, frames) == greedy_decode(dec, encoder, frames)


def test_max_len_one_gives_one_token(overfit, encoder):
    dec, train, _ = overfit
    for u in train.utterances:
        assert greedy_decode(dec, encoder, u.frames, max_len=1) == u.tokens[1:2]


def test_max_len_bounds(tiny, encoder):
    dec = Decoder(student_config())
    frames = tiny[1].utterances[0].frames
    with pytest.raises(ValueError):
        greedy_decode(dec, encoder, frames, max_len=0)
    with pytest.raises(ValueError):
        greedy_decode(dec, encoder, frames, max_len=dec.cfg.max_tgt_len + 1)
    assert len(greedy_decode(dec, encoder, frames, max_len=dec.cfg.max_tgt_len)) <= dec.cfg.max_tgt_len


def test_batched_decode_matches_single(tiny, encoder):
    dec = Decoder(student_config(seed=3))
    val = tiny[1]
    batched = greedy_decode_features(dec, val.features)
    assert batched == [greedy_decode(dec, encoder, u.frames) for u in val.utterances]


def test_evaluate_counts(overfit):
    dec, train, _ = overfit
    rep = evaluate(dec, train, "ce", "train")
    assert rep.wer == 0.0 and rep.s == rep.i == rep.d == 0
    assert len(rep.per_utterance) == 4


def test_latency_contract(tiny, encoder):
    dec = Decoder(student_config())
    frames = [u.frames for u in tiny[1].utterances[:3]]
    with pytest.raises(ValueError):
        bench_latency(dec, dec, encoder, frames, repetitions=1)
    reps = bench_latency(dec, dec, encoder, frames, repetitions=5, max_len=4)
    assert [r.model for r in reps] == ["teacher", "student"]
    assert reps[0].relative == 1.0
    assert all(r.mean_ms > 0 and r.median_ms > 0 for r in reps)
    rows = list(csv.DictReader(io.StringIO(latency_csv(reps))))
    assert list(rows[0]) == ["model", "mean_ms", "median_ms", "relative"]


def _short(cfg):
    # three epochs: warm-up, one decayed AKD epoch, one SKD epoch
    sched = dataclasses.replace(cfg.schedule, total_epochs=3, warmup_epochs=1, lam=0.7)
    return dataclasses.replace(cfg, schedule=sched)


def test_compare_methods_table(tiny, tiny_cfg, tmp_path):
    cfg = _short(tiny_cfg)
    methods = ["ce", "kd", "skd", "akd", "askd"]
    with pytest.raises(ValueError, match="3 seeds"):
        compare_methods(cfg, methods, [0, 1], tiny[1])
    table = compare_methods(cfg, methods, [0, 1, 2], tiny[1], tmp_path / "cmp")
    assert [r.label for r in table.rows] == [m for m in methods for _ in range(3)]
    text = (tmp_path / "cmp" / "comparison.csv").read_text()
    assert text == table.csv()
    rows = list(csv.DictReader(io.StringIO(text)))
    assert list(rows[0]) == ["method", "seed", "wer", "s", "i", "d"]
    summary = table.summary()
    for m in methods:
        vals = [float(r["wer"]) for r in rows if r["method"] == m]
        assert summary[m][0] == statistics.fmean(vals)
        assert summary[m][1] == statistics.stdev(vals)
    assert "askd" in (tmp_path / "cmp" / "comparison.txt").read_text()
    again = compare_methods(cfg, methods, [0, 1, 2], tiny[1])
    assert again.csv() == table.csv()


def test_sweep_rows(tiny, tiny_cfg, tmp_path):
    cfg = _short(tiny_cfg)
    with pytest.raises(ValueError):
        sweep_alpha_min(cfg, [1.0], [0], tiny[1])
    res = sweep_alpha_min(cfg, [0.3, 0.5, 0.7], [0], tiny[1], tmp_path / "sw")
    assert [r.label for r in res.rows] == ["0.3", "0.5", "0.7", FIXED]
    rows = list(csv.DictReader(io.StringIO((tmp_path / "sw" / "sweep.csv").read_text())))
    assert list(rows[0]) == ["min_alpha", "seed", "wer"] and len(rows) == 4
    dyn, fix = res.dynamic_vs_fixed()[0]
    assert dyn == pytest.approx(statistics.fmean(r.wer for r in res.rows[:3]))
    assert fix == res.rows[3].wer
    assert sweep_alpha_min(cfg, [0.3, 0.5, 0.7], [0], tiny[1]).csv() == res.csv()


def test_diverged_runs_are_recorded(tiny, tiny_cfg, monkeypatch):
    from askdlab.errors import DivergenceError
    import askdlab.evalkit.experiments as X

    real = X.distill

    def flaky(cfg, *a, **k):
        if cfg.seed == 1 and cfg.method.value == "ce":
            raise DivergenceError("boom")
        return real(cfg, *a, **k)

    monkeypatch.setattr(X, "distill", flaky)
    table = compare_methods(_short(tiny_cfg), ["ce"], [0, 1, 2], tiny[1])
    bad = [r for r in table.rows if r.diverged]
    assert len(bad) == 1 and bad[0].seed == 1 and np.isnan(bad[0].wer)
    assert table.summary()["ce"][2] == 2
    assert "diverged: ce/seed1" in table.format()
