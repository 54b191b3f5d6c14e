"""Two-layer perceptron encoder with unit-norm outputs, backprop and SGD.

The checkpoint format is a 4-byte little-endian header length, a UTF-8 JSON
header, and the parameter tensors as little-endian float32 in the order
``w1, b1, w2, b2``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptFile, DimensionMismatch, StaleCache

PARAM_NAMES = ("w1", "b1", "w2", "b2")
NORM_GUARD = 1e-12


@dataclass
class EncoderConfig:
    input_dim: int
    hidden_dim: int = 128
    embed_dim: int = 128
    init_scale: float | None = None  # None -> 1/sqrt(fan_in) per layer
    seed: int = 0

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.embed_dim) < 1:
            raise ValueError("encoder dimensions must be >= 1")


@dataclass
class EncoderParams:
    w1: np.ndarray  # (h, d)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (e, h)
    b2: np.ndarray  # (e,)

    @classmethod
    def init(cls, config: EncoderConfig) -> "EncoderParams":
        rng = np.random.default_rng(config.seed)
        d, h, e = config.input_dim, config.hidden_dim, config.embed_dim
        s1 = config.init_scale or 1.0 / np.sqrt(d)
        s2 = config.init_scale or 1.0 / np.sqrt(h)
        return cls(
            w1=rng.uniform(-s1, s1, size=(h, d)),
            b1=rng.uniform(-s1, s1, size=h),
            w2=rng.uniform(-s2, s2, size=(e, h)),
            b2=rng.uniform(-s2, s2, size=e),
        )

    @classmethod
    def zeros(cls, d: int, h: int, e: int) -> "EncoderParams":
        return cls(np.zeros((h, d)), np.zeros(h), np.zeros((e, h)), np.zeros(e))

    @property
    def dims(self) -> tuple[int, int, int]:
        h, d = self.w1.shape
        return d, h, self.w2.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> "EncoderParams":
        return EncoderParams(*(a.copy() for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])


@dataclass
class ForwardCache:
    x: np.ndarray
    pre_hidden: np.ndarray
    hidden: np.ndarray
    u: np.ndarray
    norm: np.ndarray
    v: np.ndarray
    guarded: np.ndarray
    w1: np.ndarray = field(repr=False)
    w2: np.ndarray = field(repr=False)


def forward(params: EncoderParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Embed ``x`` (n, d) to unit vectors (n, e).

    Rows whose pre-normalization norm is below 1e-12 map to the first basis
    vector.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.w1.shape[1]:
        raise DimensionMismatch(
            f"input shape {x.shape} incompatible with input_dim {params.w1.shape[1]}")
    pre = x @ params.w1.T + params.b1
    hid = np.maximum(pre, 0.0)
    u = hid @ params.w2.T + params.b2
    norm = np.linalg.norm(u, axis=1)
    guarded = norm < NORM_GUARD
    v = np.empty_like(u)
    ok = ~guarded
    v[ok] = u[ok] / norm[ok, None]
    v[guarded] = 0.0
    v[guarded, 0] = 1.0
    return v, ForwardCache(x, pre, hid, u, norm, v, guarded, params.w1, params.w2)


def backward(cache: ForwardCache, grad_v: np.ndarray) -> tuple[EncoderParams, np.ndarray]:
    """Backpropagate ``grad_v`` through the encoder.

    Returns parameter gradients (as an :class:`EncoderParams`) and the
    gradient with respect to the input.  Guarded rows receive zero gradient.
    """
    grad_v = np.asarray(grad_v, dtype=np.float64)
    if grad_v.shape != cache.v.shape:
        raise StaleCache(f"grad shape {grad_v.shape} != cached output {cache.v.shape}")
    v = cache.v
    radial = np.sum(v * grad_v, axis=1, keepdims=True)
    safe_norm = np.where(cache.guarded, 1.0, cache.norm)[:, None]
    grad_u = (grad_v - v * radial) / safe_norm
    grad_u[cache.guarded] = 0.0

    g_w2 = grad_u.T @ cache.hidden
    g_b2 = grad_u.sum(axis=0)
    grad_pre = (grad_u @ cache.w2) * (cache.pre_hidden > 0)
    g_w1 = grad_pre.T @ cache.x
    g_b1 = grad_pre.sum(axis=0)
    grad_x = grad_pre @ cache.w1
    return EncoderParams(g_w1, g_b1, g_w2, g_b2), grad_x


@dataclass
class OptimizerState:
    """SGD with momentum, coupled weight decay and a two-step LR decay."""

    velocity: EncoderParams
    momentum: float = 0.9
    weight_decay: float = 1e-4
    base_lr: float = 0.02
    epoch_count: int = 80
    epoch: int = 0
    decay_points: tuple[float, float] = (0.5, 0.75)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.base_lr < 0:
            raise ValueError("learning rate must be nonnegative")

    @classmethod
    def for_params(cls, params: EncoderParams, **kwargs) -> "OptimizerState":
        velocity = EncoderParams(*(np.zeros_like(a) for a in params.arrays()))
        return cls(velocity=velocity, **kwargs)


def lr_at(opt: OptimizerState, epoch: int, total_epochs: int) -> float:
    """Step schedule: divide by 10 at each decay point (boundaries decay)."""
    lr = opt.base_lr
    for point in opt.decay_points:
        if epoch >= point * total_epochs:
            lr /= 10.0
    return lr


def sgd_step(params: EncoderParams, grads: EncoderParams,
             opt: OptimizerState) -> EncoderParams:
    """One in-place momentum SGD update; returns ``params``."""
    lr = lr_at(opt, opt.epoch, max(opt.epoch_count, 1))
    for name in PARAM_NAMES:
        p = getattr(params, name)
        g = getattr(grads, name)
        if p.shape != g.shape:
            raise DimensionMismatch(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        vel = getattr(opt.velocity, name)
        vel *= opt.momentum
        vel += g
        if opt.weight_decay:
            vel += opt.weight_decay * p
        p -= lr * vel
    return params


def save_checkpoint(path, params: EncoderParams, seed: int = 0, epoch: int = 0,
                    extra: dict | None = None) -> None:
    d, h, e = params.dims
    header = {"input_dim": d, "hidden_dim": h, "embed_dim": e, "seed": int(seed),
              "epoch": int(epoch), "dtype": "<f4",
              "tensors": [[n, list(getattr(params, n).shape)] for n in PARAM_NAMES]}
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[EncoderParams, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise CorruptFile(f"{path}: truncated header")
    (n,) = struct.unpack("<I", raw[:4])
    try:
        header = json.loads(raw[4:4 + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header") from exc
    offset = 4 + n
    arrays = []
    for _, shape in header["tensors"]:
        count = int(np.prod(shape))
        chunk = raw[offset:offset + 4 * count]
        if len(chunk) != 4 * count:
            raise CorruptFile(f"{path}: truncated tensor data")
        arrays.append(np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape))
        offset += 4 * count
    if offset != len(raw):
        raise CorruptFile(f"{path}: trailing bytes after tensors")
    return EncoderParams(*arrays), header
