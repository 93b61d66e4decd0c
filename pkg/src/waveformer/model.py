"""Model configuration, assembly, parameter accounting and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, DimensionError
from .layers import (
    Dense,
    Module,
    MultiScaleSpec,
    TransformerBlock,
    make_multiscale_spec,
    multi_scale_layer,
    positional_encoding,
    time_average_pool,
)

VARIANTS = ("baseline", "pooled", "multiscale")

CHECKPOINT_MAGIC = b"ATFM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    Defaults describe the large 6-layer model.  ``head_dim`` is the width of
    each attention head's query/key/value projection (``None`` means
    ``embed_dim // num_heads``); ``ff_layers`` counts the dense layers of the
    position-wise feed-forward block.
    """

    num_layers: int = 6
    embed_dim: int = 64
    num_heads: int = 8
    head_dim: Optional[int] = 64
    ff_dim: int = 128
    ff_layers: int = 3
    frontend_hidden: int = 2048
    frame_len: int = 400
    num_frames: int = 40
    head_hidden: int = 128
    head_layers: int = 3
    n_labels: int = 200
    variant: str = "baseline"

    @classmethod
    def small(cls, **overrides) -> "ModelConfig":
        return cls(**{"num_layers": 3, "frontend_hidden": 1024, **overrides})

    @classmethod
    def large(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def preset(cls, size: str, **overrides) -> "ModelConfig":
        if size == "small":
            return cls.small(**overrides)
        if size == "large":
            return cls.large(**overrides)
        raise ConfigError(f"size: unknown preset {size!r}")

    @property
    def resolved_head_dim(self) -> int:
        return self.head_dim if self.head_dim is not None else self.embed_dim // self.num_heads

    def pool_sites(self) -> list[int]:
        """Zero-based block indices followed by pooling or multi-scale averaging."""
        if self.variant == "baseline":
            return []
        return [i for i in range(1, self.num_layers - 1, 2)]

    def validate(self) -> None:
        positive = [f.name for f in dataclasses.fields(self) if f.name not in ("variant", "head_dim")]
        for name in positive:
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name}: must be a positive integer, got {value!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: expected one of {VARIANTS}, got {self.variant!r}")
        if self.head_dim is None:
            if self.embed_dim % self.num_heads:
                raise ConfigError(
                    f"num_heads: {self.num_heads} does not divide embed_dim {self.embed_dim}"
                )
        elif not isinstance(self.head_dim, int) or self.head_dim < 1:
            raise ConfigError(f"head_dim: must be a positive integer or None, got {self.head_dim!r}")
        if self.embed_dim % 2:
            raise ConfigError(f"embed_dim: must be even for positional encoding, got {self.embed_dim}")
        if self.ff_layers < 2:
            raise ConfigError(f"ff_layers: need at least 2, got {self.ff_layers}")
        if self.head_layers < 1:
            raise ConfigError(f"head_layers: need at least 1, got {self.head_layers}")
        if self.variant == "pooled":
            factor = 2 ** len(self.pool_sites())
            if self.num_frames % factor:
                raise ConfigError(
                    f"num_frames: {self.num_frames} not divisible by total pooling factor {factor}"
                )

    def to_text(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        try:
            raw = json.loads(text)
            cfg = cls(**raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"unreadable config text: {exc}") from exc
        cfg.validate()
        return cfg


class AudioTransformer(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        c = config
        self.frontend = [
            Dense(c.frame_len, c.frontend_hidden, rng, dtype),
            Dense(c.frontend_hidden, c.embed_dim, rng, dtype),
        ]
        self.blocks = [
            TransformerBlock(
                c.embed_dim,
                c.num_heads,
                c.ff_dim,
                rng,
                head_dim=c.head_dim,
                ff_layers=c.ff_layers,
                max_len=c.num_frames,
                dtype=dtype,
            )
            for _ in range(c.num_layers)
        ]
        dims = [c.embed_dim] + [c.head_hidden] * (c.head_layers - 1) + [c.n_labels]
        self.head = [Dense(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]
        self.pe = positional_encoding(c.num_frames, c.embed_dim, dtype)
        self.multiscale_specs: dict[int, MultiScaleSpec] = {}
        if c.variant == "multiscale":
            for site in c.pool_sites():
                self.multiscale_specs[site] = make_multiscale_spec(c.num_frames, c.embed_dim)

    def __call__(self, frames, probe: bool = False, time_lengths: list | None = None) -> Tensor:
        return forward(self, frames, probe=probe, time_lengths=time_lengths)


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> AudioTransformer:
    """Construct a model with weights drawn deterministically from ``seed``."""
    return AudioTransformer(config, np.random.default_rng(seed), dtype)


def forward(model: AudioTransformer, frames, probe: bool = False, time_lengths: list | None = None) -> Tensor:
    """Map framed waveforms ``[B, num_frames, frame_len]`` to sigmoid scores ``[B, n_labels]``.

    With ``probe=True`` the global time pooling and the head are skipped and
    the per-frame embeddings of the last block are returned.  If
    ``time_lengths`` is a list, the sequence length seen by each block (and
    the final one) is appended to it.
    """
    c = model.config
    x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=model.dtype))
    if x.ndim == 2:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1:] != (c.num_frames, c.frame_len):
        raise DimensionError(
            f"forward: expected [B, {c.num_frames}, {c.frame_len}] frames, got {x.shape}"
        )
    if x.dtype != model.dtype and not x.requires_grad:
        x = Tensor(x.data.astype(model.dtype))
    h = ad.relu(model.frontend[0](x))
    h = model.frontend[1](h)
    h = ad.add(h, _broadcast_pe(model.pe, h.shape[0]))
    sites = set(c.pool_sites())
    for i, block in enumerate(model.blocks):
        if time_lengths is not None:
            time_lengths.append(h.shape[-2])
        h = block(h)
        if i in sites:
            if c.variant == "pooled":
                h = time_average_pool(h, 2)
            else:
                h = multi_scale_layer(h, model.multiscale_specs[i])
    if time_lengths is not None:
        time_lengths.append(h.shape[-2])
    if probe:
        return h
    z = ad.reduce(h, -2, "mean")
    for layer in model.head[:-1]:
        z = ad.relu(layer(z))
    return ad.sigmoid(model.head[-1](z))


def _broadcast_pe(pe: Tensor, batch: int) -> Tensor:
    # constant, so a plain tiled array is enough
    return Tensor(np.broadcast_to(pe.data, (batch,) + pe.shape).copy())


def param_count(model: Module) -> int:
    return sum(p.size for p in model.parameters())


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(model: AudioTransformer, path) -> None:
    """Write parameters (as little-endian float32) and the embedded config."""
    cfg = model.config.to_text().encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(cfg)), cfg]
    for name, p in model.named_parameters():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Parse a checkpoint into its config and a name -> float32 array map."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(buf)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    cfg_len = r.u32("config length")
    try:
        config = ModelConfig.from_text(r.take(cfg_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid embedded config: {exc}") from exc
    params: dict[str, np.ndarray] = {}
    while not r.done:
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * count, f"values of {name}"), dtype="<f4")
        params[name] = data.reshape(dims).astype(np.float32)
    return config, params


def load_checkpoint(path, model: AudioTransformer | None = None) -> AudioTransformer:
    """Load a checkpoint into ``model`` or into a freshly built float32 model.

    Every record is checked against the target before anything is assigned,
    so a mismatch leaves ``model`` untouched.
    """
    config, params = read_checkpoint(path)
    if model is None:
        model = build(config, seed=0, dtype=np.float32)
    expected = dict(model.named_parameters())
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise CheckpointError(f"{path}: parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, target in expected.items():
        if params[name].shape != target.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: checkpoint {params[name].shape}, model {target.shape}"
            )
    for name, target in expected.items():
        target.data = params[name].astype(target.dtype)
        target.grad = None
    return model
