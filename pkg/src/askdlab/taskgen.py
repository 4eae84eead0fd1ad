"""Synthetic speech-like transduction data.

Each utterance is a random token string rendered as a sequence of noisy
frames: every token maps to a fixed seeded embedding vector which is repeated
for a random number of frames (duration jitter) before Gaussian noise is
added. The model has to recover the token string from the frames.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError
from .model import BOS, EOS, N_SPECIAL, PAD

SPLITS = ("train", "val", "test", "shifted")
FRAME_DECIMALS = 5


@dataclass(frozen=True)
class TaskSpec:
    vocab_size: int = 32
    d_feat: int = 16
    frames_per_token: tuple[int, int] = (2, 4)
    noise_std: float = 0.5
    shifted_noise_std: float = 0.75
    min_len: int = 4
    max_len: int = 12
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "frames_per_token", tuple(self.frames_per_token))
        if self.vocab_size <= N_SPECIAL:
            raise ConfigError("vocab_size must leave room for content tokens")
        if self.noise_std < 0 or self.shifted_noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        lo, hi = self.frames_per_token
        if not 1 <= lo <= hi:
            raise ConfigError("frames_per_token must be a nonempty range of positive ints")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("token length range must be nonempty")

    @property
    def max_src_len(self) -> int:
        return self.max_len * self.frames_per_token[1]

    @property
    def max_tgt_len(self) -> int:
        return self.max_len + 2

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)


@dataclass
class Utterance:
    id: str
    frames: np.ndarray
    tokens: list[int] = field(default_factory=list)

    def __eq__(self, other):
        return (
            isinstance(other, Utterance)
            and self.id == other.id
            and self.tokens == other.tokens
            and np.array_equal(self.frames, other.frames)
        )


def token_table(spec: TaskSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0xE3B])
    return rng.standard_normal((spec.vocab_size, spec.d_feat))


def _utterance(spec: TaskSpec, table: np.ndarray, split: str, i: int) -> Utterance:
    # one generator stream per utterance id
    rng = np.random.default_rng([spec.seed, SPLITS.index(split) + 1, i])
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    content = rng.integers(N_SPECIAL, spec.vocab_size, size=n)
    lo, hi = spec.frames_per_token
    durations = rng.integers(lo, hi + 1, size=n)
    clean = np.repeat(table[content], durations, axis=0)
    std = spec.shifted_noise_std if split == "shifted" else spec.noise_std
    frames = np.round(clean + std * rng.standard_normal(clean.shape), FRAME_DECIMALS)
    return Utterance(f"{split}-{i:06d}", frames, [BOS, *map(int, content), EOS])


def generate(spec: TaskSpec, n: int, split: str) -> list[Utterance]:
    if n < 1:
        raise ValueError("n must be >= 1")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    table = token_table(spec)
    return [_utterance(spec, table, split, i) for i in range(n)]


def _record(u: Utterance) -> str:
    return json.dumps({"id": u.id, "frames": u.frames.tolist(), "tokens": list(u.tokens)},
                      separators=(",", ":"))


def save_dataset(data: Sequence[Utterance], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u in data:
            fh.write(_record(u) + "\n")
    return path


def gen_dataset(spec: TaskSpec, n: int, split: str, path) -> Path:
    """Write ``n`` utterances of ``split`` to ``path`` plus ``task_spec.json`` beside it."""
    path = Path(path)
    save_dataset(generate(spec, n, split), path)
    (path.parent / "task_spec.json").write_text(spec.to_json() + "\n")
    return path


class DatasetError(ValueError):
    pass


def load_dataset(path, vocab_size: int | None = None) -> list[Utterance]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                frames = np.asarray(rec["frames"], dtype=np.float64)
                tokens = [int(t) for t in rec["tokens"]]
                uid = str(rec["id"])
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record ({exc})") from None
            if frames.ndim != 2 or frames.shape[0] == 0 or not np.isfinite(frames).all():
                raise DatasetError(f"{path}:{lineno}: frames must be a non-empty finite matrix")
            if len(tokens) < 2 or tokens[0] != BOS or tokens[-1] != EOS or PAD in tokens:
                raise DatasetError(f"{path}:{lineno}: tokens must start with BOS, end with EOS, contain no PAD")
            if vocab_size is not None and max(tokens) >= vocab_size:
                raise DatasetError(f"{path}:{lineno}: token id {max(tokens)} outside vocab of {vocab_size}")
            out.append(Utterance(uid, frames, tokens))
    if not out:
        raise DatasetError(f"{path}: dataset is empty")
    return out


def load_task_spec(path) -> TaskSpec:
    return TaskSpec.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    idx: np.ndarray          # positions in the dataset
    inputs: np.ndarray       # [B, T] decoder inputs, BOS-first, PAD-filled
    targets: np.ndarray      # [B, T] next tokens, PAD-filled
    mask: np.ndarray         # [B, T] true on real target positions
    frames: list[np.ndarray]

    def __len__(self):
        return len(self.idx)


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0xBA7C]).permutation(n)


def make_batch(data: Sequence[Utterance], idx) -> Batch:
    idx = np.asarray(idx, dtype=np.int64)
    t = max(len(data[i].tokens) for i in idx) - 1
    inputs = np.full((len(idx), t), PAD, dtype=np.int64)
    targets = np.full((len(idx), t), PAD, dtype=np.int64)
    for r, i in enumerate(idx):
        tok = data[i].tokens
        inputs[r, :len(tok) - 1] = tok[:-1]
        targets[r, :len(tok) - 1] = tok[1:]
    return Batch(idx, inputs, targets, targets != PAD, [data[i].frames for i in idx])


def batch_iter(data: Sequence[Utterance], batch_size: int, seed: int, epoch: int,
               shuffle: bool = True) -> Iterator[Batch]:
    """Padded minibatches whose order is a pure function of ``(seed, epoch)``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = batch_order(len(data), seed, epoch) if shuffle else np.arange(len(data))
    for start in range(0, len(order), batch_size):
        yield make_batch(data, order[start:start + batch_size])


def pad_stack(rows: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack [L_i, d] arrays into [B, max L, d] plus a bool validity mask [B, max L]."""
    n = max(r.shape[0] for r in rows)
    out = np.zeros((len(rows), n) + rows[0].shape[1:])
    mask = np.zeros((len(rows), n), dtype=bool)
    for i, r in enumerate(rows):
        out[i, :r.shape[0]] = r
        mask[i, :r.shape[0]] = True
    return out, mask
