"""On-disk formats: PFM disparity maps, PNG images, manifests, checkpoints,
and the flat key=value run configuration.

PFM files use the single-channel "Pf" header with a negative scale
(little-endian) and bottom-up row order; round-trips are bit-exact.
Images quantize to 8-bit PNG.  Checkpoints serialize named parameters with
their Adam moments as little-endian float32 and round-trip bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image

from .tensor import Param

__all__ = [
    "FileFormatError",
    "ConfigError",
    "write_pfm",
    "read_pfm",
    "write_png",
    "read_png",
    "write_manifest",
    "read_manifest",
    "save_checkpoint",
    "load_checkpoint",
    "MATCH_MAGIC",
    "SR_MAGIC",
    "RunConfig",
]

MATCH_MAGIC = b"PAMCKPT1"
SR_MAGIC = b"PAMSRCK1"


class FileFormatError(ValueError):
    """Malformed or truncated input file."""


class ConfigError(ValueError):
    """Unknown key or bad value in a run configuration."""


# -- PFM ---------------------------------------------------------------------

def write_pfm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("PFM writer expects a 2-D array")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(arr[::-1].astype("<f4").tobytes())  # bottom-up rows


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise FileFormatError(f"bad PFM header {header!r} (only single-channel 'Pf' supported)")
        dims = f.readline().split()
        if len(dims) != 2:
            raise FileFormatError("bad PFM extent line")
        try:
            w, h = int(dims[0]), int(dims[1])
            scale = float(f.readline().strip())
        except ValueError as e:
            raise FileFormatError(f"bad PFM header field: {e}") from e
        endian = "<" if scale < 0 else ">"
        raw = f.read(4 * w * h)
        if len(raw) != 4 * w * h:
            raise FileFormatError("truncated PFM payload")
        data = np.frombuffer(raw, dtype=endian + "f4").reshape(h, w)
    return data[::-1].astype(np.float32)


# -- PNG ---------------------------------------------------------------------

def write_png(path, img: np.ndarray) -> None:
    """Store a (C,H,W) or (H,W) float image in [0,1] as 8-bit PNG."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    c = arr.shape[0]
    q = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if c == 1:
        Image.fromarray(q[0], mode="L").save(path)
    elif c == 3:
        Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path)
    else:
        raise ValueError(f"unsupported channel count {c}")


def read_png(path) -> np.ndarray:
    """Load a PNG as (C,H,W) float in [0,1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except Exception as e:
        raise FileFormatError(f"unreadable PNG {path}: {e}") from e
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0


# -- manifest -------------------------------------------------------------------

def write_manifest(path, rows: Sequence[Tuple[str, str, str, str]]) -> None:
    """One sample per line: left, right, disparity, occlusion paths."""
    with open(path, "w") as f:
        for row in rows:
            f.write(" ".join(row) + "\n")


def read_manifest(path) -> List[Tuple[str, str, str, str]]:
    rows = []
    p = Path(path)
    if not p.exists():
        raise FileFormatError(f"manifest not found: {path}")
    for ln, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FileFormatError(f"{path}:{ln}: expected 4 paths, got {len(parts)}")
        rows.append(tuple(parts))
    return rows


# -- checkpoints --------------------------------------------------------------------

def save_checkpoint(path, params: Dict[str, Param], step: int, magic: bytes = MATCH_MAGIC) -> None:
    """Binary layout: magic, u64 step, u32 count, then per parameter:
    u32 name length, name bytes, u32 ndim, u32 extents, float32 values,
    float32 Adam first/second moments, u64 per-parameter step count."""
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<QI", step, len(params)))
        for name, p in params.items():
            nb = name.encode("utf-8")
            arr = p.value.data.astype("<f4")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
            f.write(p.adam_m.astype("<f4").tobytes())
            f.write(p.adam_v.astype("<f4").tobytes())
            f.write(struct.pack("<Q", p.step_count))


def load_checkpoint(path, params: Dict[str, Param], magic: bytes = MATCH_MAGIC) -> int:
    """Restore parameter values/moments in place; returns the stored step."""
    blob = Path(path).read_bytes()
    if len(blob) < 20 or blob[:8] != magic:
        raise FileFormatError(f"bad checkpoint magic in {path}")
    off = 8
    step, count = struct.unpack_from("<QI", blob, off)
    off += 12
    if count != len(params):
        raise FileFormatError(f"checkpoint has {count} parameters, model has {len(params)}")
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        if name not in params:
            raise FileFormatError(f"unknown parameter {name!r} in checkpoint")
        p = params[name]
        if tuple(shape) != p.value.data.shape:
            raise FileFormatError(f"shape mismatch for {name!r}: {shape} vs {p.value.data.shape}")
        def take(count=n):
            nonlocal off
            out = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            return out
        p.value.data = take().astype(p.value.data.dtype)
        p.adam_m = take().astype(np.float64 if p.adam_m.dtype == np.float64 else np.float32)
        p.adam_v = take().astype(p.adam_v.dtype)
        (p.step_count,) = struct.unpack_from("<Q", blob, off)
        off += 8
    if off != len(blob):
        raise FileFormatError(f"trailing bytes in checkpoint {path}")
    return step


# -- run configuration -----------------------------------------------------------------

@dataclass
class RunConfig:
    """Flat training/generation configuration; unknown keys are rejected.

    Loss weights default to the published synthetic-data values.
    """

    task: str = "pasm"          # pasm | passr
    height: int = 64
    width: int = 128
    channels: int = 1
    net_channels: int = 32
    stages: int = 3
    blocks: int = 4
    d_max: int = -1             # -1 disables the range mask
    scale: int = 2              # SR upscaling factor
    alpha: float = 0.85
    lambda_s: float = 0.1
    lambda_pam: float = 1.0
    lambda_pam_s: float = 1.0
    lambda_pam_c: float = 1.0
    lambda_sr_pam: float = 0.005
    tau: float = 0.1
    lr: float = 1e-3
    lr_decay_step: int = 0      # 0 -> steps // 2
    lr_decay: float = 0.1
    steps: int = 1000
    batch: int = 4
    seed: int = 0
    num_samples: int = 64
    max_disp: float = 16.0
    texture: str = "dots"
    checkpoint_every: int = 500

    _INT = {"height", "width", "channels", "net_channels", "stages", "blocks",
            "d_max", "scale", "lr_decay_step", "steps", "batch", "seed",
            "num_samples", "checkpoint_every"}
    _FLOAT = {"alpha", "lambda_s", "lambda_pam", "lambda_pam_s", "lambda_pam_c",
              "lambda_sr_pam", "tau", "lr", "lr_decay", "max_disp"}

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls) if not f.name.startswith("_")]

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        cfg = cls()
        known = set(cls.keys())
        for ln, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {ln}: expected key = value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {ln}: unknown key {key!r}")
            try:
                if key in cls._INT:
                    setattr(cfg, key, int(val))
                elif key in cls._FLOAT:
                    setattr(cfg, key, float(val))
                else:
                    setattr(cfg, key, val)
            except ValueError as e:
                raise ConfigError(f"line {ln}: bad value for {key}: {e}") from e
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text())

    def validate(self) -> None:
        if self.task not in ("pasm", "passr"):
            raise ConfigError(f"task must be pasm or passr, got {self.task!r}")
        if self.scale not in (2, 4):
            raise ConfigError("scale must be 2 or 4")
        if self.stages < 1 or self.stages > 3:
            raise ConfigError("stages must lie in 1..3")
        if min(self.height, self.width, self.net_channels, self.blocks, self.batch) < 1:
            raise ConfigError("extents and counts must be positive")

    def dumps(self) -> str:
        lines = []
        for key in self.keys():
            v = getattr(self, key)
            if isinstance(v, float):
                lines.append(f"{key} = {v:.10g}")
            else:
                lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())
