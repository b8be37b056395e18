"""Model configuration, parameter store and checkpoint format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import Tensor

AGGREGATORS = ("attention", "mean", "max")


class ConfigError(ValueError):
    pass


@dataclass
class WsdConfig:
    feature_dim: int
    num_classes: int = 2
    heads: int = 8
    window_base: int = 4
    landmarks: int = 64
    pinv_iters: int = 6
    serg_grid: int = 8
    serg_reduction: int = 4
    attn_hidden: int = 128
    aggregator: str = "attention"
    disable_wsda: bool = False
    fixed_window_grid: Optional[int] = None
    disable_serg: bool = False

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.feature_dim < 1 or self.num_classes < 2:
            raise ConfigError("feature_dim must be >= 1 and num_classes >= 2")
        if self.heads < 1 or self.feature_dim % self.heads:
            raise ConfigError(f"feature_dim {self.feature_dim} not divisible by heads {self.heads}")
        if self.window_base < 1 or self.landmarks < 1 or self.pinv_iters < 1:
            raise ConfigError("window_base, landmarks and pinv_iters must be >= 1")
        if self.serg_grid < 1 or self.serg_reduction < 1 or (self.serg_grid ** 2) % self.serg_reduction:
            raise ConfigError(f"serg_grid^2 = {self.serg_grid ** 2} not divisible by "
                              f"serg_reduction {self.serg_reduction}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.fixed_window_grid is not None:
            if self.fixed_window_grid < 1:
                raise ConfigError("fixed_window_grid must be >= 1")
            if self.disable_wsda:
                raise ConfigError("fixed_window_grid replaces the decaying windows; "
                                  "it cannot be combined with disable_wsda")

    @property
    def scales(self) -> list[int]:
        """Window grids applied after the Nystrom layer, coarse windows first."""
        if self.fixed_window_grid is not None:
            return [self.fixed_window_grid]
        k = self.window_base
        return [k, 2 * k, 4 * k]

    @property
    def pooling_only(self) -> bool:
        return self.aggregator != "attention"

    def sequence_multiple(self) -> int:
        """Every padded length the model accepts is a multiple of this."""
        mult = (4 * self.window_base) ** 2
        if self.pooling_only:
            return 1
        parts = [mult]
        if not self.disable_wsda:
            parts += [g * g for g in self.scales] + [self.landmarks]
        if not self.disable_serg:
            parts.append(self.serg_grid ** 2)
        return int(np.lcm.reduce(parts))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "WsdConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown WsdConfig keys: {sorted(unknown)}")
        return cls(**payload)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def param_shapes(cfg: WsdConfig) -> dict[str, tuple]:
    F, C = cfg.feature_dim, cfg.num_classes
    shapes: dict[str, tuple] = {}
    if not cfg.pooling_only:
        if not cfg.disable_wsda:
            shapes["nys.w_qkv"] = (F, 3 * F)
            shapes["nys.proj.weight"] = (F, F)
            shapes["nys.proj.bias"] = (F,)
            for i, _ in enumerate(cfg.scales):
                p = f"win{i}."
                shapes[p + "w_qkv"] = (F, 3 * F)
                shapes[p + "conv"] = (cfg.heads, 3)
                shapes[p + "norm1.gain"] = (F,)
                shapes[p + "norm1.bias"] = (F,)
                shapes[p + "lin1.weight"] = (F, F)
                shapes[p + "lin1.bias"] = (F,)
                shapes[p + "norm2.gain"] = (F,)
                shapes[p + "norm2.bias"] = (F,)
                shapes[p + "lin2.weight"] = (F, F)
                shapes[p + "lin2.bias"] = (F,)
        if not cfg.disable_serg:
            L2 = cfg.serg_grid ** 2
            red = L2 // cfg.serg_reduction
            shapes["serg.w1"] = (red, L2)
            shapes["serg.b1"] = (red,)
            shapes["serg.w2"] = (L2, red)
            shapes["serg.b2"] = (L2,)
        shapes["agg.v"] = (cfg.attn_hidden, F)
        shapes["agg.w"] = (cfg.attn_hidden,)
    shapes["cls.weight"] = (C, F)
    shapes["cls.bias"] = (C,)
    return shapes


NYS_QK_INIT = 0.25


def init_params(cfg: WsdConfig, seed=None) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            out[name] = np.ones(shape)
        elif leaf in ("bias", "b1", "b2", "conv"):
            out[name] = np.zeros(shape)
        elif name == "nys.w_qkv":
            # similarity attention with an identity value path, so the global
            # layer starts out passing instance features through
            f = cfg.feature_dim
            eye = np.eye(f)
            out[name] = np.hstack([NYS_QK_INIT * eye, NYS_QK_INIT * eye, eye])
        elif name == "nys.proj.weight":
            out[name] = np.eye(cfg.feature_dim)
        elif name.endswith("lin2.weight"):
            # window blocks start as the identity map (residual branch off)
            out[name] = np.zeros(shape)
        else:
            # w_qkv is applied as x @ W; every other matrix as x @ W.T
            fan_in = shape[0] if leaf == "w_qkv" else shape[-1]
            out[name] = _uniform(rng, shape, fan_in)
    return out


class WsdModel:
    """All learnable tensors of one network plus its config."""

    def __init__(self, config: WsdConfig, params: Optional[dict] = None, seed=None):
        self.config = config
        raw = init_params(config, seed) if params is None else params
        expected = param_shapes(config)
        if set(raw) != set(expected):
            missing, extra = set(expected) - set(raw), set(raw) - set(expected)
            raise ConfigError(f"parameter names do not match config (missing {sorted(missing)}, "
                              f"unexpected {sorted(extra)})")
        self.params: dict[str, Tensor] = {}
        for name, shape in expected.items():
            arr = np.array(raw[name], dtype=np.float64)
            if arr.shape != shape:
                raise ConfigError(f"parameter {name}: shape {arr.shape} != expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"parameter {name} has non-finite values")
            self.params[name] = Tensor(arr, requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


# checkpoint container: "WSDC" u16 version, u32 json length, json, u32 count,
# then per tensor: u16 name length, name, u8 ndim, u32 dims, f64 payload
CKPT_MAGIC = b"WSDC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: WsdModel, metadata: Optional[dict] = None) -> bytes:
    header = {"config": model.config.to_dict(), "metadata": metadata or {}}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(blob)), blob,
             struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        arr = model.params[name].data
        enc = name.encode()
        parts.append(struct.pack("<HB", len(enc), arr.ndim))
        parts.append(enc)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: WsdModel, path, metadata: Optional[dict] = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, metadata))


def parse_checkpoint(raw: bytes) -> tuple[WsdModel, dict]:
    try:
        return _parse_checkpoint(raw)
    except CheckpointError:
        raise
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc


def _parse_checkpoint(raw: bytes) -> tuple[WsdModel, dict]:
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}")
    version, blen = struct.unpack_from("<HI", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    header = json.loads(raw[pos:pos + blen])
    pos += blen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    params = {}
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<HB", raw, pos)
        pos += 3
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes in checkpoint")
    model = WsdModel(WsdConfig.from_dict(header["config"]), params)
    return model, header.get("metadata", {})


def load_checkpoint(path) -> tuple[WsdModel, dict]:
    return parse_checkpoint(Path(path).read_bytes())
