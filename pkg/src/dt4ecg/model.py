"""Dual-head residual 1D-CNN with SCA, and its binary checkpoint format."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ShapeError, Tensor
from .nn import BatchNorm1d, Conv1d, Linear, Module, ResidualBlock1d, global_avg_pool, relu
from .sca import ScaModule

CHECKPOINT_MAGIC = b"DT4E"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointFormatError(ValueError):
    """Malformed checkpoint; the message names the byte offset."""


@dataclass
class ModelConfig:
    input_len: int = 300
    n_subjects: int = 15
    n_activities: int = 3
    stem_channels: int = 32
    stem_kernel: int = 7
    stem_stride: int = 2
    # (out_channels, stride) per residual block
    blocks: list = field(default_factory=lambda: [[64, 2], [128, 2], [128, 1]])
    block_kernel: int = 3
    sca_reduction: int = 4
    use_sca: bool = True
    seed: int = 0

    def validate(self) -> None:
        for name in ("input_len", "n_subjects", "n_activities", "stem_channels", "stem_kernel",
                     "stem_stride", "block_kernel", "sca_reduction"):
            if getattr(self, name) < 1:
                raise ValueError(f"model config: {name} must be positive")
        if not self.blocks or any(c < 1 or s < 1 for c, s in self.blocks):
            raise ValueError("model config: blocks must be non-empty (channels, stride) pairs")
        if self.time_lengths()[-1] < 1:
            raise ValueError("model config: derived time length < 1")

    def time_lengths(self) -> list[int]:
        """Time length after the stem and after each block."""
        T = (self.input_len + 2 * (self.stem_kernel // 2) - self.stem_kernel) // self.stem_stride + 1
        lens = [self.input_len, T]
        p = self.block_kernel // 2
        for _, stride in self.blocks:
            T = (T + 2 * p - self.block_kernel) // stride + 1
            T = (T + 2 * p - self.block_kernel) + 1
            lens.append(T)
        return lens

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Dt4EcgModel(Module):
    def __init__(self, config: ModelConfig | None = None, dtype=np.float32):
        config = config or ModelConfig()
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.stem_conv = Conv1d(1, config.stem_channels, config.stem_kernel, config.stem_stride,
                                config.stem_kernel // 2, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm1d(config.stem_channels, dtype=dtype)
        self.blocks = []
        ch = config.stem_channels
        for out_ch, stride in config.blocks:
            self.blocks.append(ResidualBlock1d(ch, out_ch, stride, config.block_kernel, rng=rng, dtype=dtype))
            ch = out_ch
        T_final = config.time_lengths()[-1]
        self.sca = ScaModule(ch, T_final, config.sca_reduction, rng=rng, dtype=dtype) if config.use_sca else None
        self.head_id = Linear(ch, config.n_subjects, rng=rng, dtype=dtype)
        self.head_activity = Linear(ch, config.n_activities, rng=rng, dtype=dtype)

    def features(self, x: Tensor) -> Tensor:
        """Shared backbone: stem, residual blocks, SCA, global average pooling."""
        if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] != self.config.input_len:
            raise ShapeError(f"model: expected input (B, 1, {self.config.input_len}), got {x.shape}")
        h = relu(self.stem_bn(self.stem_conv(x)))
        for block in self.blocks:
            h = block(h)
        if self.sca is not None:
            h = self.sca(h)
        return global_avg_pool(h)

    def forward(self, x) -> tuple[Tensor, Tensor]:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.stem_conv.weight.dtype))
        f = self.features(x)
        return self.head_id(f), self.head_activity(f)

    def shared_parameters(self, scope: str = "last") -> list[Tensor]:
        """Parameters feeding both heads.

        ``scope="last"`` is the final residual block plus SCA; ``"backbone"`` is
        everything below the heads.
        """
        if scope == "backbone":
            return [p for n, p in self.named_parameters() if not n.startswith("head_")]
        if scope != "last":
            raise ValueError(f"unknown shared-parameter scope {scope!r}")
        ps = self.blocks[-1].parameters()
        if self.sca is not None:
            ps += self.sca.parameters()
        return ps

    def state_tensors(self) -> list[tuple[str, np.ndarray]]:
        """All persisted arrays in a fixed order: parameters, then running statistics."""
        return [(n, p.data) for n, p in self.named_parameters()] + self.named_buffers()


def model_forward(x, m: Dt4EcgModel) -> tuple[Tensor, Tensor]:
    return m(x)


def count_parameters(m: Module) -> int:
    return int(sum(p.data.size for p in m.parameters()))


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def checkpoint_bytes(m: Dt4EcgModel) -> bytes:
    cfg = json.dumps(asdict(m.config), sort_keys=True).encode("utf-8")
    tensors = m.state_tensors()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise TypeError(f"checkpoint: unsupported dtype {arr.dtype} for {name}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def save_checkpoint(m: Dt4EcgModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(m))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(
                f"truncated at offset {self.pos}: need {n} bytes for {what}, {len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(buf: bytes) -> tuple[ModelConfig, list[tuple[str, np.ndarray]]]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r} at offset 0, expected {CHECKPOINT_MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported version {version} at offset 4")
    (cfg_len,) = r.unpack("<I", "config length")
    cfg_off = r.pos
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(cfg_len, "config").decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"bad config blob at offset {cfg_off}: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = []
    for i in range(count):
        (nlen,) = r.unpack("<I", f"name length of tensor {i}")
        name = r.take(nlen, f"name of tensor {i}").decode("utf-8")
        off = r.pos
        code, rank = r.unpack("<BB", f"dtype/rank of {name}")
        if code not in _CODE_DTYPES:
            raise CheckpointFormatError(f"unknown dtype code {code} at offset {off} ({name})")
        shape = r.unpack(f"<{rank}I", f"extents of {name}")
        dt = _CODE_DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = r.take(n * dt.itemsize, f"payload of {name}")
        tensors.append((name, np.frombuffer(payload, dtype=dt).reshape(shape).copy()))
    if r.pos != len(buf):
        raise CheckpointFormatError(f"trailing bytes at offset {r.pos}")
    return cfg, tensors


def load_checkpoint(path) -> Dt4EcgModel:
    cfg, tensors = parse_checkpoint(Path(path).read_bytes())
    dtype = tensors[0][1].dtype if tensors else np.float32
    m = Dt4EcgModel(cfg, dtype=dtype)
    expected = m.state_tensors()
    if [n for n, _ in expected] != [n for n, _ in tensors]:
        raise CheckpointFormatError("tensor names do not match the model built from the stored config")
    for (name, dst), (_, src) in zip(expected, tensors):
        if dst.shape != src.shape:
            raise CheckpointFormatError(f"tensor {name}: stored shape {src.shape} vs model {dst.shape}")
        dst[...] = src
    return m.eval()
