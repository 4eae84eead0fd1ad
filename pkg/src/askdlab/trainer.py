"""Training loops: teacher pretraining and the distillation method family.

``distill`` runs one student for ``schedule.total_epochs`` epochs under one of
five methods:

* ``ce``   hard-label cross-entropy only
* ``kd``   hard-label CE plus a constant-weight KL term to the teacher
* ``akd``  same, with the teacher weight decayed per epoch after warm-up
* ``skd``  one hard-label epoch, then self-distillation against the
  previous epoch's student with a ramping soft-label weight
* ``askd`` the adaptive phase until the teacher weight reaches the
  threshold, then self-distillation

Every epoch boundary writes ``epoch_<e>.snap`` into the checkpoint directory
along with one line of ``reports.jsonl``; an interrupted run resumes from the
last complete epoch.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses as L
from . import numkernel as nk
from .errors import ConfigError, DivergenceError
from .evalkit.decode import greedy_decode_features
from .evalkit.metrics import corpus_wer
from .model import (Decoder, EncoderConfig, FrozenEncoder, ModelConfig, ModelSnapshot,
                    param_count, student_config, teacher_config)
from .optim import make_optimizer
from .schedule import EpochPlan, Phase, ScheduleConfig, alpha_akd_at, alpha_skd_at, trajectory
from .taskgen import Utterance, batch_iter, load_dataset, make_batch, pad_stack

log = logging.getLogger(__name__)


class Method(str, enum.Enum):
    CE_ONLY = "ce"
    KD_FIXED = "kd"
    SKD_ONLY = "skd"
    AKD = "akd"
    ASKD = "askd"

    @property
    def needs_teacher(self) -> bool:
        return self in (Method.KD_FIXED, Method.AKD, Method.ASKD)


@dataclass(frozen=True)
class TrainConfig:
    schedule: ScheduleConfig = ScheduleConfig()
    model_student: ModelConfig = field(default_factory=student_config)
    model_teacher: ModelConfig = field(default_factory=teacher_config)
    encoder: EncoderConfig = EncoderConfig()
    method: Method = Method.ASKD
    lr: float = 3e-3
    optimizer: str = "adam"
    batch_size: int = 16
    seed: int = 0
    alpha_kd: float = 1.0
    train_path: str | None = None
    val_path: str | None = None
    teacher_path: str | None = None
    checkpoint_dir: str | None = None
    val_limit: int = 200
    # teacher pretraining
    teacher_lr: float = 3e-3
    teacher_optimizer: str = "adam"
    teacher_batch_size: int = 16
    teacher_max_epochs: int = 30
    teacher_patience: int = 4

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0 or not self.teacher_lr > 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1 or self.teacher_batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.alpha_kd <= 1.0:
            raise ConfigError("alpha_kd must lie in [0, 1]")
        s, t = self.model_student, self.model_teacher
        for cfg, name in ((s, "model_student"), (t, "model_teacher")):
            if cfg.d_enc != self.encoder.d_enc:
                raise ConfigError(f"{name}.d_enc must equal encoder.d_enc")
            if cfg.max_src_len < self.encoder.max_src_len:
                raise ConfigError(f"{name}.max_src_len must cover encoder.max_src_len")
        if s.vocab_size != t.vocab_size:
            raise ConfigError("student and teacher vocab sizes differ")

    @property
    def student(self) -> ModelConfig:
        """Student architecture with its init seed tied to the run seed."""
        return dataclasses.replace(self.model_student, seed=self.seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["method"] = self.method.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"schedule": ScheduleConfig, "model_student": ModelConfig,
                  "model_teacher": ModelConfig, "encoder": EncoderConfig}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("checkpoint_dir")  # where a run lives does not change what it computes
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class EpochReport:
    epoch: int
    phase: str
    losses: L.LossBreakdown
    val_ter: float
    seconds: float = 0.0
    alpha: float | None = None
    batch_losses: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        # wall-clock time is kept out so reports are reproducible byte for byte
        return {"epoch": self.epoch, "phase": self.phase, "alpha": self.alpha,
                "losses": self.losses.to_dict(), "val_ter": self.val_ter}

    @classmethod
    def from_dict(cls, d: dict) -> "EpochReport":
        return cls(d["epoch"], d["phase"], L.LossBreakdown(**d["losses"]), d["val_ter"], alpha=d.get("alpha"))


# ---------------------------------------------------------------------------
# data with cached encoder output
# ---------------------------------------------------------------------------

class Corpus:
    """Utterances plus their (frozen) encoder features, computed once."""

    def __init__(self, utterances: Sequence[Utterance], encoder: FrozenEncoder):
        self.utterances = list(utterances)
        self.encoder = encoder
        self.features = [encoder.encode(u.frames) for u in self.utterances]

    def __len__(self) -> int:
        return len(self.utterances)

    def head(self, n: int) -> "Corpus":
        c = Corpus.__new__(Corpus)
        c.utterances, c.encoder, c.features = self.utterances[:n], self.encoder, self.features[:n]
        return c

    def batch_features(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return pad_stack([self.features[i] for i in idx])


def soft_targets(dec: Decoder, corpus: Corpus, tau: float, chunk: int = 64) -> list[np.ndarray]:
    """Per-utterance teacher distributions [T_i, V] at temperature ``tau``.

    Chunks are taken in dataset order so the result does not depend on the
    minibatch order that later consumes it.
    """
    out: list[np.ndarray] = []
    with nk.no_grad():
        for start in range(0, len(corpus), chunk):
            idx = np.arange(start, min(start + chunk, len(corpus)))
            b = make_batch(corpus.utterances, idx)
            feats, mask = corpus.batch_features(idx)
            probs = L.softmax_temperature(dec.forward(b.inputs, feats, mask), tau).data
            for r, i in enumerate(idx):
                n = len(corpus.utterances[i].tokens) - 1
                out.append(probs[r, :n].copy())
    return out


def _gather(rows: Sequence[np.ndarray], idx, t_len: int) -> np.ndarray:
    v = rows[0].shape[-1]
    out = np.zeros((len(idx), t_len, v))
    out[:, :, 0] = 1.0  # padded rows hold a valid (masked-out) distribution
    for r, i in enumerate(idx):
        n = rows[i].shape[0]
        out[r, :n] = rows[i]
    return out


def token_error_rate(dec: Decoder, corpus: Corpus, limit: int | None = None) -> float:
    c = corpus if limit is None else corpus.head(limit)
    hyps = greedy_decode_features(dec, c.features)
    refs = [u.tokens[1:-1] for u in c.utterances]
    return corpus_wer(refs, hyps).rate


# ---------------------------------------------------------------------------
# epochs
# ---------------------------------------------------------------------------

def _finite(value: float, cfg: TrainConfig, what: str) -> float:
    if not np.isfinite(value):
        raise DivergenceError(f"{what} is not finite (seed={cfg.seed}, config={json.dumps(cfg.to_dict())})")
    return value


def _mean_breakdown(rows: list[L.LossBreakdown]) -> L.LossBreakdown:
    out = {}
    for key in ("l_s", "l_kl", "l_akd", "l_skd", "l_total"):
        vals = [getattr(r, key) for r in rows]
        out[key] = None if vals[0] is None else float(np.mean(vals))
    return L.LossBreakdown(**out)


def _step(loss: nk.Tensor, student: Decoder, optimizer, cfg: TrainConfig) -> None:
    _finite(loss.item(), cfg, "training loss")
    nk.backward(loss)
    optimizer.step()


def _hard(b, vocab: int) -> np.ndarray:
    return np.eye(vocab)[b.targets]


def run_epoch_ce(student: Decoder, corpus: Corpus, plan: EpochPlan, cfg: TrainConfig,
                 optimizer, val: Corpus | None = None) -> EpochReport:
    t0 = time.perf_counter()
    rows = []
    for b in batch_iter(corpus.utterances, cfg.batch_size, cfg.seed, plan.epoch):
        feats, smask = corpus.batch_features(b.idx)
        logits = student(b.inputs, feats, smask)
        l_s = L.soft_ce_loss(_hard(b, student.cfg.vocab_size), L.softmax_temperature(logits, 1.0), b.mask)
        rows.append(L.LossBreakdown(l_s=l_s.item(), l_total=l_s.item()))
        _step(l_s, student, optimizer, cfg)
    return _report(plan, rows, student, val, cfg, t0, None)


def run_epoch_akd(student: Decoder, teacher: Decoder | None, corpus: Corpus, plan: EpochPlan,
                  cfg: TrainConfig, optimizer, val: Corpus | None = None,
                  teacher_probs: list[np.ndarray] | None = None) -> EpochReport:
    """Hard-label CE plus ``alpha_akd`` times the temperature-scaled KL to the teacher."""
    if plan.phase is not Phase.AKD:
        raise ValueError(f"run_epoch_akd needs an AKD plan, got {plan.phase}")
    if teacher is None and teacher_probs is None:
        raise ValueError("AKD epoch needs a teacher")
    tau = cfg.schedule.tau
    if teacher_probs is None:
        teacher_probs = soft_targets(teacher, corpus, tau)
    t0 = time.perf_counter()
    rows = []
    for b in batch_iter(corpus.utterances, cfg.batch_size, cfg.seed, plan.epoch):
        feats, smask = corpus.batch_features(b.idx)
        logits = student(b.inputs, feats, smask)
        l_s = L.soft_ce_loss(_hard(b, student.cfg.vocab_size), L.softmax_temperature(logits, 1.0), b.mask)
        p_t = _gather(teacher_probs, b.idx, b.inputs.shape[1])
        p_s = L.softmax_temperature(logits, tau)
        l_kl = L.kl_loss(p_t, p_s, tau, b.mask)
        l_akd = nk.scale(l_kl, plan.alpha_akd)
        total = L.total_loss_akd(l_s, l_akd)
        rows.append(L.LossBreakdown(l_s=l_s.item(), l_kl=l_kl.item(), l_akd=l_akd.item(), l_total=total.item()))
        _step(total, student, optimizer, cfg)
    return _report(plan, rows, student, val, cfg, t0, plan.alpha_akd)


def run_epoch_skd(student: Decoder, prev_snapshot: ModelSnapshot, corpus: Corpus, plan: EpochPlan,
                  cfg: TrainConfig, optimizer, val: Corpus | None = None) -> EpochReport:
    """Soft-label CE against a mix of hard labels and the previous-epoch student."""
    if plan.phase is not Phase.SKD:
        raise ValueError(f"run_epoch_skd needs an SKD plan, got {plan.phase}")
    if prev_snapshot.epoch != plan.epoch - 1:
        raise ValueError(f"stale snapshot: epoch {prev_snapshot.epoch}, expected {plan.epoch - 1}")
    prev = Decoder.from_snapshot(student.cfg, prev_snapshot)
    # previous student as teacher, untempered, fixed for the whole epoch
    prev_probs = soft_targets(prev, corpus, 1.0)
    t0 = time.perf_counter()
    rows = []
    for b in batch_iter(corpus.utterances, cfg.batch_size, cfg.seed, plan.epoch):
        feats, smask = corpus.batch_features(b.idx)
        logits = student(b.inputs, feats, smask)
        p_prev = _gather(prev_probs, b.idx, b.inputs.shape[1])
        l_skd = L.skd_loss(_hard(b, student.cfg.vocab_size), p_prev,
                           L.softmax_temperature(logits, 1.0), plan.alpha_skd, b.mask)
        rows.append(L.LossBreakdown(l_skd=l_skd.item(), l_total=l_skd.item()))
        _step(l_skd, student, optimizer, cfg)
    return _report(plan, rows, student, val, cfg, t0, plan.alpha_skd)


def _report(plan, rows, student, val, cfg, t0, alpha) -> EpochReport:
    mean = _mean_breakdown(rows)
    _finite(mean.l_total, cfg, "epoch loss")
    ter = token_error_rate(student, val, cfg.val_limit) if val is not None else float("nan")
    return EpochReport(plan.epoch, plan.phase.value, mean, ter, time.perf_counter() - t0, alpha, rows)


# ---------------------------------------------------------------------------
# plans per method
# ---------------------------------------------------------------------------

def method_plans(method: Method, sched: ScheduleConfig, alpha_kd: float = 1.0) -> list[EpochPlan]:
    method = Method(method)
    epochs = range(sched.total_epochs)
    if method is Method.ASKD:
        return trajectory(sched)
    if method is Method.AKD:
        return [EpochPlan(e, Phase.AKD, alpha_akd_at(e, sched), 0.0) for e in epochs]
    if method is Method.KD_FIXED:
        return [EpochPlan(e, Phase.AKD, alpha_kd, 0.0) for e in epochs]
    if method is Method.SKD_ONLY:
        return [EpochPlan(e, Phase.CE if e == 0 else Phase.SKD, 0.0, alpha_skd_at(e, sched)) for e in epochs]
    return [EpochPlan(e, Phase.CE, 0.0, 0.0) for e in epochs]


# ---------------------------------------------------------------------------
# teacher
# ---------------------------------------------------------------------------

def pretrain_teacher(train: Corpus, val: Corpus, cfg: TrainConfig, path=None) -> ModelSnapshot:
    """Hard-label training of the teacher until validation error stalls.

    Stops after ``teacher_patience`` epochs without improvement or at
    ``teacher_max_epochs``; returns (and optionally saves) the best epoch.
    """
    if param_count(cfg.model_teacher) <= param_count(cfg.student):
        raise ConfigError("teacher must have more parameters than the student")
    teacher = Decoder(cfg.model_teacher)
    opt = make_optimizer(cfg.teacher_optimizer, teacher.parameters(), cfg.teacher_lr)
    tcfg = dataclasses.replace(cfg, batch_size=cfg.teacher_batch_size)
    best, best_ter, stale = None, float("inf"), 0
    for e in range(cfg.teacher_max_epochs):
        rep = run_epoch_ce(teacher, train, EpochPlan(e, Phase.CE, 0.0, 0.0), tcfg, opt, val)
        log.info("teacher epoch %d loss %.4f val_ter %.4f", e, rep.losses.l_total, rep.val_ter)
        if rep.val_ter < best_ter:
            best, best_ter, stale = teacher.snapshot(e), rep.val_ter, 0
        else:
            stale += 1
            if stale >= cfg.teacher_patience:
                break
    if path is not None:
        best.save(path)
    return best


def load_teacher(cfg: TrainConfig) -> Decoder:
    if not cfg.teacher_path:
        raise ConfigError("teacher_path is required for this method")
    snap = ModelSnapshot.load(cfg.teacher_path, cfg.model_teacher.config_hash())
    return Decoder.from_snapshot(cfg.model_teacher, snap).freeze()


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------

def _load_corpora(cfg: TrainConfig, encoder: FrozenEncoder) -> tuple[Corpus, Corpus | None]:
    if not cfg.train_path:
        raise ConfigError("train_path is required")
    vocab = cfg.model_student.vocab_size
    train = Corpus(load_dataset(cfg.train_path, vocab), encoder)
    val = Corpus(load_dataset(cfg.val_path, vocab), encoder) if cfg.val_path else None
    return train, val


def _resume_point(ckpt: Path, cfg: TrainConfig) -> tuple[int, list[EpochReport]]:
    """Last fully written epoch (-1 for a fresh run) and its reports."""
    cfg_file = ckpt / "config.json"
    if not cfg_file.exists():
        return -1, []
    saved = json.loads(cfg_file.read_text())
    if saved.get("hash") != cfg.config_hash():
        raise ConfigError(f"config hash mismatch in {ckpt}; refusing to resume")
    reports = []
    rep_file = ckpt / "reports.jsonl"
    if rep_file.exists():
        reports = [EpochReport.from_dict(json.loads(x)) for x in rep_file.read_text().splitlines() if x.strip()]
    last = -1
    for r in reports:
        if r.epoch != last + 1 or not (ckpt / f"epoch_{r.epoch}.snap").exists():
            break
        last = r.epoch
    return last, reports[: last + 1]


def distill(cfg: TrainConfig, train: Corpus | None = None, val: Corpus | None = None,
            teacher: Decoder | None = None, teacher_probs: list[np.ndarray] | None = None,
            on_epoch=None) -> tuple[ModelSnapshot, list[EpochReport]]:
    """Train a student under ``cfg.method``; returns the final snapshot and epoch reports.

    ``train``/``val`` default to the dataset files named in the config, and
    ``teacher`` to ``cfg.teacher_path``. ``on_epoch(student, report)`` is
    called after each epoch (handy for audits).
    """
    encoder = FrozenEncoder(cfg.encoder)
    if train is None:
        train, val = _load_corpora(cfg, encoder)
    plans = method_plans(cfg.method, cfg.schedule, cfg.alpha_kd)
    if cfg.method.needs_teacher and teacher is None and teacher_probs is None:
        teacher = load_teacher(cfg)

    student = Decoder(cfg.student)
    optimizer = make_optimizer(cfg.optimizer, student.parameters(), cfg.lr)
    ckpt = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    reports: list[EpochReport] = []
    start = 0
    prev_snap: ModelSnapshot | None = None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
        last, reports = _resume_point(ckpt, cfg)
        if last >= 0:
            prev_snap = ModelSnapshot.load(ckpt / f"epoch_{last}.snap", cfg.student.config_hash())
            student.load_flat(prev_snap.params)
            opt_file = ckpt / f"epoch_{last}.opt.npz"
            if opt_file.exists():
                with np.load(opt_file) as st:
                    optimizer.load_state_dict(dict(st))
            start = last + 1
            log.info("resuming %s at epoch %d", ckpt, start)
        (ckpt / "config.json").write_text(json.dumps(
            {"config": cfg.to_dict(), "hash": cfg.config_hash()}, indent=2, sort_keys=True) + "\n")
        (ckpt / "reports.jsonl").write_text("".join(json.dumps(r.to_dict()) + "\n" for r in reports))

    if teacher_probs is None and teacher is not None and start < len(plans) and any(
            p.phase is Phase.AKD for p in plans[start:]):
        teacher_probs = soft_targets(teacher, train, cfg.schedule.tau)

    for plan in plans[start:]:
        try:
            if plan.phase is Phase.AKD:
                rep = run_epoch_akd(student, teacher, train, plan, cfg, optimizer, val, teacher_probs)
            elif plan.phase is Phase.SKD:
                rep = run_epoch_skd(student, prev_snap, train, plan, cfg, optimizer, val)
            else:
                rep = run_epoch_ce(student, train, plan, cfg, optimizer, val)
        except nk.NonFiniteError as exc:
            raise DivergenceError(f"{exc} (seed={cfg.seed}, config={json.dumps(cfg.to_dict())})") from exc
        prev_snap = student.snapshot(plan.epoch)
        reports.append(rep)
        log.info("%s seed %d epoch %d %s loss %.4f val_ter %.4f", cfg.method.value, cfg.seed,
                 plan.epoch, rep.phase, rep.losses.l_total, rep.val_ter)
        if ckpt is not None:
            prev_snap.save(ckpt / f"epoch_{plan.epoch}.snap")
            state = optimizer.state_dict()
            if state:
                np.savez(ckpt / f"epoch_{plan.epoch}.opt.npz", **state)
            with open(ckpt / "reports.jsonl", "a") as fh:
                fh.write(json.dumps(rep.to_dict()) + "\n")
            with open(ckpt / "timings.jsonl", "a") as fh:
                fh.write(json.dumps({"epoch": rep.epoch, "seconds": rep.seconds}) + "\n")
        if on_epoch is not None:
            on_epoch(student, rep)
    if prev_snap is None:
        prev_snap = student.snapshot(len(plans) - 1)
    return prev_snap, reports
