"""Multi-seed experiment harnesses: method comparison, alpha-floor sweep, latency."""

from __future__ import annotations

import dataclasses
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import DivergenceError
from ..model import Decoder, FrozenEncoder
from ..trainer import Corpus, Method, TrainConfig, distill, load_teacher, soft_targets, _load_corpora
from .decode import greedy_decode, greedy_decode_features
from .metrics import WerResult, corpus_wer, wer

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    method: str
    split: str
    wer: float
    s: int
    i: int
    d: int
    per_utterance: list[WerResult] = field(default_factory=list, repr=False)


def evaluate(dec: Decoder, corpus: Corpus, method: str = "", split: str = "test") -> EvalReport:
    hyps = greedy_decode_features(dec, corpus.features)
    refs = [u.tokens[1:-1] for u in corpus.utterances]
    total = corpus_wer(refs, hyps)
    return EvalReport(method, split, total.rate, total.s, total.i, total.d,
                      [wer(r, h) for r, h in zip(refs, hyps)])


@dataclass
class RunRow:
    label: str
    seed: int
    wer: float
    s: int = 0
    i: int = 0
    d: int = 0
    diverged: bool = False


class _Shared:
    """Corpora, teacher and cached teacher targets reused across runs."""

    def __init__(self, cfg: TrainConfig, test: Corpus | str):
        self.encoder = FrozenEncoder(cfg.encoder)
        self.train, self.val = _load_corpora(cfg, self.encoder)
        if not isinstance(test, Corpus):
            from ..taskgen import load_dataset
            test = Corpus(load_dataset(test, cfg.model_student.vocab_size), self.encoder)
        self.test = test
        self._teacher = None
        self._targets = {}

    def teacher_targets(self, cfg: TrainConfig):
        if self._teacher is None:
            self._teacher = load_teacher(cfg)
        tau = cfg.schedule.tau
        if tau not in self._targets:
            self._targets[tau] = soft_targets(self._teacher, self.train, tau)
        return self._teacher, self._targets[tau]

    def run(self, cfg: TrainConfig, label: str) -> RunRow:
        teacher = probs = None
        if cfg.method.needs_teacher:
            teacher, probs = self.teacher_targets(cfg)
        try:
            snap, _ = distill(cfg, self.train, self.val, teacher, probs)
        except DivergenceError as exc:
            log.warning("run %s seed %d diverged: %s", label, cfg.seed, exc)
            return RunRow(label, cfg.seed, math.nan, diverged=True)
        rep = evaluate(Decoder.from_snapshot(cfg.student, snap), self.test, label)
        log.info("%s seed %d test wer %.4f", label, cfg.seed, rep.wer)
        return RunRow(label, cfg.seed, rep.wer, rep.s, rep.i, rep.d)


def _summary(rows: Sequence[RunRow]) -> dict[str, tuple[float, float, int]]:
    out = {}
    for label in dict.fromkeys(r.label for r in rows):
        vals = [r.wer for r in rows if r.label == label and not r.diverged]
        mean = statistics.fmean(vals) if vals else math.nan
        std = statistics.stdev(vals) if len(vals) > 1 else 0.0
        out[label] = (mean, std, len(vals))
    return out


@dataclass
class ComparisonTable:
    rows: list[RunRow]

    def summary(self) -> dict[str, tuple[float, float, int]]:
        """label -> (mean WER, sample std, number of finished seeds)."""
        return _summary(self.rows)

    def by_seed(self, label: str) -> dict[int, float]:
        return {r.seed: r.wer for r in self.rows if r.label == label}

    def csv(self) -> str:
        lines = ["method,seed,wer,s,i,d"]
        lines += [f"{r.label},{r.seed},{r.wer!r},{r.s},{r.i},{r.d}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def format(self) -> str:
        head = f"{'method':<8} {'mean WER':>10} {'std':>8} {'seeds':>6}"
        body = [f"{k:<8} {m * 100:>9.2f}% {s * 100:>7.2f}% {n:>6}" for k, (m, s, n) in self.summary().items()]
        diverged = [f"{r.label}/seed{r.seed}" for r in self.rows if r.diverged]
        tail = [f"diverged: {', '.join(diverged)}"] if diverged else []
        return "\n".join([head, "-" * len(head), *body, *tail]) + "\n"


def compare_methods(cfg: TrainConfig, methods: Sequence, seeds: Sequence[int], test,
                    out_dir=None) -> ComparisonTable:
    """Train every method on every seed and score it on ``test``.

    Runs live in ``out_dir/<method>/seed_<s>`` and resume if present.
    """
    if len(seeds) < 3:
        raise ValueError("compare_methods needs at least 3 seeds")
    shared = _Shared(cfg, test)
    out = Path(out_dir) if out_dir else None
    rows = []
    for m in map(Method, methods):
        for s in seeds:
            ckpt = str(out / m.value / f"seed_{s}") if out else None
            rows.append(shared.run(dataclasses.replace(cfg, method=m, seed=s, checkpoint_dir=ckpt), m.value))
    table = ComparisonTable(rows)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(table.csv())
        (out / "comparison.txt").write_text(table.format())
    return table


FIXED = "fixed"


@dataclass
class SweepResult:
    rows: list[RunRow]

    def csv(self) -> str:
        lines = ["min_alpha,seed,wer"]
        lines += [f"{r.label},{r.seed},{r.wer!r}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def summary(self) -> dict[str, tuple[float, float, int]]:
        return _summary(self.rows)

    def dynamic_vs_fixed(self) -> dict[int, tuple[float, float]]:
        """seed -> (mean WER over the decaying floors, fixed-alpha WER)."""
        out = {}
        for s in dict.fromkeys(r.seed for r in self.rows):
            dyn = [r.wer for r in self.rows if r.seed == s and r.label != FIXED]
            fix = [r.wer for r in self.rows if r.seed == s and r.label == FIXED]
            out[s] = (statistics.fmean(dyn), fix[0])
        return out


def sweep_alpha_min(cfg: TrainConfig, min_alphas: Sequence[float], seeds: Sequence[int], test,
                    out_dir=None, include_fixed: bool = True, method=Method.ASKD) -> SweepResult:
    """Teacher weight decaying to each floor, plus a no-decay control.

    With the default ``method=askd`` the floor is the switch threshold: the
    adaptive step bottoms out at ``min_alpha`` and self-distillation takes
    over. ``method=akd`` keeps the teacher term to the end, clamped at the floor.
    """
    method = Method(method)
    if method not in (Method.ASKD, Method.AKD):
        raise ValueError("sweep method must be askd or akd")
    init = cfg.schedule.alpha_akd_initial
    for a in min_alphas:
        if not 0.0 < a < init:
            raise ValueError(f"min_alpha {a} must lie in (0, {init})")
    shared = _Shared(cfg, test)
    out = Path(out_dir) if out_dir else None
    rows = []

    def floored(a):
        if method is Method.ASKD:  # the switch happens at lam, so the clamp never binds
            return dataclasses.replace(cfg.schedule, lam=a)
        return dataclasses.replace(cfg.schedule, alpha_akd_floor=a, lam=a)

    variants = [(repr(float(a)), dataclasses.replace(cfg, method=method, schedule=floored(float(a))))
                for a in min_alphas]
    if include_fixed:
        variants.append((FIXED, dataclasses.replace(cfg, method=Method.KD_FIXED, alpha_kd=init)))
    for label, vcfg in variants:
        for s in seeds:
            ckpt = str(out / f"floor_{label}" / f"seed_{s}") if out else None
            rows.append(shared.run(dataclasses.replace(vcfg, seed=s, checkpoint_dir=ckpt), label))
    result = SweepResult(rows)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(result.csv())
    return result


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------

@dataclass
class LatencyReport:
    model: str
    mean_ms: float
    median_ms: float
    relative: float


def bench_latency(teacher: Decoder, student: Decoder, encoder: FrozenEncoder, frames: Sequence[np.ndarray],
                  repetitions: int = 5, warmup: int = 2, names=("teacher", "student"),
                  max_len: int | None = None) -> list[LatencyReport]:
    """Per-utterance single-worker greedy decode time; relative = teacher mean / model mean.

    Decodes alternate between the two models so drift in machine load hits
    both equally. Warm-up decodes are not timed.
    """
    if repetitions < 5:
        raise ValueError("repetitions must be >= 5")
    models = (teacher, student)
    for _ in range(warmup):
        for m in models:
            greedy_decode(m, encoder, frames[0], max_len)
    times: list[list[float]] = [[], []]
    for _ in range(repetitions):
        for x in frames:
            for k, m in enumerate(models):
                t0 = time.perf_counter()
                greedy_decode(m, encoder, x, max_len)
                times[k].append(time.perf_counter() - t0)
    base = statistics.fmean(times[0])
    return [LatencyReport(name, 1e3 * statistics.fmean(t), 1e3 * statistics.median(t), base / statistics.fmean(t))
            for name, t in zip(names, times)]


def latency_csv(reports: Sequence[LatencyReport]) -> str:
    lines = ["model,mean_ms,median_ms,relative"]
    lines += [f"{r.model},{r.mean_ms:.4f},{r.median_ms:.4f},{r.relative:.4f}" for r in reports]
    return "\n".join(lines) + "\n"
