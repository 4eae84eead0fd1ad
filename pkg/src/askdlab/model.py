"""Frozen feature extractor plus a small pre-norm transformer decoder.

The decoder stacks causal self-attention, cross-attention over encoder
features and a SwiGLU feed-forward block. Teacher and student are the same
class at different sizes and share one frozen encoder.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import functional as F
from . import numkernel as nk
from .errors import ConfigError
from .numkernel import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
N_SPECIAL = 4

SNAP_MAGIC = b"ASKDSNAP"
SNAP_VERSION = 1
_HEADER = struct.Struct("<8sI32sqQ")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    d_model: int = 64
    n_heads: int = 4
    n_decoder_layers: int = 2
    d_ff: int = 128
    max_src_len: int = 64
    max_tgt_len: int = 16
    seed: int = 0
    d_enc: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("d_model", "n_heads", "n_decoder_layers", "d_ff", "max_src_len", "max_tgt_len", "d_enc"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.vocab_size < N_SPECIAL:
            raise ConfigError(f"vocab_size must be >= {N_SPECIAL} (pad/bos/eos/unk)")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def student_config(**kw) -> ModelConfig:
    return ModelConfig(**{"d_model": 64, "n_decoder_layers": 2, "d_ff": 128, **kw})


def teacher_config(**kw) -> ModelConfig:
    return ModelConfig(**{"d_model": 128, "n_decoder_layers": 6, "d_ff": 256, **kw})


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = (6.0 / (fan_in + fan_out)) ** 0.5
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# frozen encoder
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    d_feat: int = 16
    d_enc: int = 64
    max_src_len: int = 64
    seed: int = 1234


class FrozenEncoder:
    """Seeded two-layer projection with sinusoidal positional mixing.

    Plays the role of a pretrained audio extractor: its weights are generated
    once from the seed and never updated, and it records no graph.
    """

    # fixed smoothing kernel over neighbouring frames
    MIX = np.array([0.25, 0.5, 0.25])

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.w1 = _glorot(rng, cfg.d_feat, cfg.d_enc)
        self.w2 = _glorot(rng, cfg.d_enc, cfg.d_enc)
        self.pos = sinusoidal_positions(cfg.max_src_len, cfg.d_enc)
        for arr in (self.w1, self.w2, self.pos):
            arr.setflags(write=False)

    @property
    def d_model(self) -> int:
        return self.cfg.d_enc

    def parameters(self) -> list[np.ndarray]:
        return [self.w1, self.w2, self.pos]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.tobytes())
        return h.hexdigest()

    def encode(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise ValueError(f"frames must be a non-empty [src_len, d_feat] matrix, got {frames.shape}")
        if frames.shape[1] != self.cfg.d_feat:
            raise ValueError(f"d_feat mismatch: expected {self.cfg.d_feat}, got {frames.shape[1]}")
        if frames.shape[0] > self.cfg.max_src_len:
            raise ValueError(f"src_len {frames.shape[0]} exceeds max_src_len {self.cfg.max_src_len}")
        if not np.isfinite(frames).all():
            raise ValueError("frames contain non-finite values")
        n = frames.shape[0]
        h = np.tanh(frames @ self.w1)
        padded = np.vstack([np.zeros((1, h.shape[1])), h, np.zeros((1, h.shape[1]))])
        mixed = self.MIX[0] * padded[:-2] + self.MIX[1] * padded[1:-1] + self.MIX[2] * padded[2:]
        return np.tanh(mixed @ self.w2) + self.pos[:n]


def encode(enc: FrozenEncoder, frames: np.ndarray) -> np.ndarray:
    return enc.encode(frames)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, v, ff, de = cfg.d_model, cfg.vocab_size, cfg.d_ff, cfg.d_enc
    shapes = [("embed", (v, d))]
    for i in range(cfg.n_decoder_layers):
        p = f"layer{i}."
        shapes += [
            (p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
            (p + "sa_q", (d, d)), (p + "sa_k", (d, d)), (p + "sa_v", (d, d)), (p + "sa_o", (d, d)),
            (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
            (p + "ca_q", (d, d)), (p + "ca_k", (de, d)), (p + "ca_v", (de, d)), (p + "ca_o", (d, d)),
            (p + "ln3_g", (d,)), (p + "ln3_b", (d,)),
            (p + "ff_w", (d, ff)), (p + "ff_v", (d, ff)), (p + "ff_out", (ff, d)),
        ]
    shapes += [("lnf_g", (d,)), ("lnf_b", (d,)), ("out_w", (d, v)), ("out_b", (v,))]
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in _param_shapes(cfg))


class Decoder:
    def __init__(self, cfg: ModelConfig, trainable: bool = True):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.params: dict[str, Tensor] = {}
        for name, shape in _param_shapes(cfg):
            short = name.rsplit(".", 1)[-1]
            if short.endswith("_g"):
                init = np.ones(shape)
            elif len(shape) == 1:
                init = np.zeros(shape)
            else:
                init = _glorot(rng, *shape)
            self.params[name] = Tensor(init, requires_grad=trainable, name=name)
        self.pos = sinusoidal_positions(cfg.max_tgt_len, cfg.d_model)

    # -- parameter plumbing -------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.parameters()])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != param_count(self.cfg):
            raise ValueError(f"parameter vector has {vec.size} entries, expected {param_count(self.cfg)}")
        off = 0
        for p in self.parameters():
            n = p.size
            p.data = vec[off:off + n].reshape(p.shape).copy()
            p.grad = None
            off += n

    def freeze(self) -> "Decoder":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def snapshot(self, epoch: int) -> "ModelSnapshot":
        return ModelSnapshot(self.flat(), self.cfg.config_hash(), epoch)

    @classmethod
    def from_snapshot(cls, cfg: ModelConfig, snap: "ModelSnapshot", trainable: bool = False) -> "Decoder":
        if snap.config_hash != cfg.config_hash():
            raise ConfigError("snapshot config hash does not match model config")
        dec = cls(cfg, trainable=trainable)
        dec.load_flat(snap.params)
        return dec

    # -- forward --------------------------------------------------------------
    def forward(self, tokens: np.ndarray, features: np.ndarray, src_mask: np.ndarray | None = None) -> Tensor:
        """Logits [B, T, V] for token ids [B, T] and encoder features [B, S, d_enc].

        ``src_mask`` is bool [B, S], true where a frame is real.
        """
        cfg, p = self.cfg, self.params
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError("tokens must be [batch, length]")
        b, t = tokens.shape
        if t > cfg.max_tgt_len:
            raise ValueError(f"target length {t} exceeds max_tgt_len {cfg.max_tgt_len}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
        features = np.asarray(features, dtype=np.float64)
        s = features.shape[1]
        if features.shape[2] != cfg.d_enc:
            raise ValueError(f"feature dim {features.shape[2]} != d_enc {cfg.d_enc}")
        if src_mask is None:
            src_mask = np.ones((b, s), dtype=bool)
        d, h = cfg.d_model, cfg.n_heads

        onehot = np.eye(cfg.vocab_size)[tokens.reshape(-1)]
        x = nk.reshape(nk.matmul(Tensor._wrap(onehot), p["embed"]), (b, t, d))
        x = nk.add(x, Tensor._wrap(np.broadcast_to(self.pos[:t], (b, t, d)).copy()))
        enc = Tensor._wrap(features)

        causal = np.broadcast_to(np.triu(np.ones((t, t), dtype=bool), k=1), (b, t, t))
        cross = np.broadcast_to(~src_mask[:, None, :], (b, t, s))

        for i in range(cfg.n_decoder_layers):
            q = f"layer{i}."
            y = F.layer_norm(x, p[q + "ln1_g"], p[q + "ln1_b"])
            att = F.attention(F.linear(y, p[q + "sa_q"]), F.linear(y, p[q + "sa_k"]),
                              F.linear(y, p[q + "sa_v"]), h, causal)
            x = nk.add(x, F.linear(att, p[q + "sa_o"]))
            y = F.layer_norm(x, p[q + "ln2_g"], p[q + "ln2_b"])
            att = F.attention(F.linear(y, p[q + "ca_q"]), F.linear(enc, p[q + "ca_k"]),
                              F.linear(enc, p[q + "ca_v"]), h, cross)
            x = nk.add(x, F.linear(att, p[q + "ca_o"]))
            y = F.layer_norm(x, p[q + "ln3_g"], p[q + "ln3_b"])
            x = nk.add(x, F.swiglu(y, p[q + "ff_w"], p[q + "ff_v"], p[q + "ff_out"]))
        x = F.layer_norm(x, p["lnf_g"], p["lnf_b"])
        return F.linear(x, p["out_w"], p["out_b"])

    __call__ = forward


def decode_logits(dec: Decoder, tokens, features: np.ndarray) -> Tensor:
    """Single-utterance logits [T, V]; row t scores the token after position t."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0 or tokens[0] != BOS:
        raise ValueError("tokens must be a non-empty sequence starting with BOS")
    logits = dec.forward(tokens[None, :], np.asarray(features)[None, :, :])
    return nk.reshape(logits, logits.shape[1:])


def swiglu(x, w, v, w_out) -> Tensor:
    return F.swiglu(nk.as_tensor(x), nk.as_tensor(w), nk.as_tensor(v), nk.as_tensor(w_out))


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSnapshot:
    params: np.ndarray
    config_hash: str
    epoch: int

    def __post_init__(self):
        arr = np.array(self.params, dtype=np.float64).reshape(-1)
        arr.setflags(write=False)
        object.__setattr__(self, "params", arr)

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(SNAP_MAGIC, SNAP_VERSION, bytes.fromhex(self.config_hash),
                              self.epoch, self.params.size)
        return header + self.params.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes, expected_hash: str | None = None) -> "ModelSnapshot":
        if len(blob) < _HEADER.size:
            raise ValueError("snapshot truncated")
        magic, version, digest, epoch, count = _HEADER.unpack_from(blob)
        if magic != SNAP_MAGIC:
            raise ValueError("not a snapshot file (bad magic)")
        if version != SNAP_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        body = blob[_HEADER.size:]
        if len(body) != 8 * count:
            raise ValueError("snapshot payload length does not match header")
        h = digest.hex()
        if expected_hash is not None and h != expected_hash:
            raise ConfigError("snapshot config hash does not match model config")
        return cls(np.frombuffer(body, dtype="<f8"), h, epoch)

    def save(self, path) -> Path:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path, expected_hash: str | None = None) -> "ModelSnapshot":
        return cls.from_bytes(Path(path).read_bytes(), expected_hash)
