"""File formats: GFLD fields, PGM image/grid exports, named-tensor containers.

GFLD layout (all little-endian):
  bytes 0..15   magic "GFLD", u32 version, 8 reserved zero bytes
  bytes 16..35  u32 d, u32 dims[3] (unused axes = 1), u32 channels
  payload       float64 samples, row-major over the spatial dims with the
                channel index fastest (channel-minor)
An optional JSON sidecar <path>.json carries the grid spacing.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .grid import DTYPE, GridSpec, ScalarField, Transform, VectorField
from .fields import interp_t

MAGIC = b"GFLD"
VERSION = 1
_HEADER = struct.Struct("<4sI8x")
_SHAPE = struct.Struct("<5I")
_MAX_POINTS = 1 << 28  # refuse absurd headers before allocating


class FieldFormatError(ValueError):
    """Base class for GFLD parsing problems."""


class BadMagicError(FieldFormatError):
    pass


class TruncatedPayloadError(FieldFormatError):
    pass


class DimOverflowError(FieldFormatError):
    pass


class UnsupportedDimensionError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file plus rename so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_field(path, field: ScalarField | VectorField) -> None:
    """Serialize a field as GFLD plus a JSON sidecar with the spacing."""
    if isinstance(field, ScalarField):
        grid, channels = field.grid, 1
        data = field.values.unsqueeze(-1)
    elif isinstance(field, VectorField):
        grid, channels = field.grid, field.grid.d
        data = field.components.permute(*range(1, grid.d + 1), 0)
    else:
        raise TypeError(f"cannot serialize {type(field).__name__} as a field")
    dims3 = list(grid.dims) + [1] * (3 - grid.d)
    header = _HEADER.pack(MAGIC, VERSION) + _SHAPE.pack(grid.d, *dims3, channels)
    payload = np.ascontiguousarray(data.numpy(), dtype="<f8").tobytes()
    atomic_write_bytes(path, header + payload)
    sidecar = {"spacing": list(grid.spacing)}
    atomic_write_text(str(path) + ".json", json.dumps(sidecar))


def read_field(path) -> ScalarField | VectorField:
    """Read a GFLD file back into a field (lossless float64 round trip)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + _SHAPE.size:
        raise TruncatedPayloadError(f"{path}: file shorter than the GFLD header")
    magic, version = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FieldFormatError(f"{path}: unsupported GFLD version {version}")
    d, n0, n1, n2, channels = _SHAPE.unpack_from(raw, _HEADER.size)
    if d not in (2, 3):
        raise FieldFormatError(f"{path}: dimensionality {d} not supported")
    dims = (n0, n1, n2)[:d]
    count = channels
    for n in dims:
        count *= n
    if count <= 0 or count > _MAX_POINTS:
        raise DimOverflowError(f"{path}: header promises {count} samples")
    expected = _HEADER.size + _SHAPE.size + 8 * count
    if len(raw) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(raw) - _HEADER.size - _SHAPE.size} bytes, "
            f"header promises {8 * count}"
        )

    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        spacing = tuple(json.loads(sidecar.read_text())["spacing"])
    else:
        spacing = tuple(1.0 / n for n in dims)
    grid = GridSpec(dims, spacing)

    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size + _SHAPE.size,
                         count=count).reshape(*dims, channels)
    values = torch.tensor(data, dtype=DTYPE)
    if channels == 1:
        return ScalarField(grid, values[..., 0])
    if channels == d:
        return VectorField(grid, values.permute(d, *range(d)).contiguous())
    raise FieldFormatError(f"{path}: {channels} channels not supported for d={d}")


def _to_gray(values: torch.Tensor) -> np.ndarray:
    v = values.numpy()
    lo, hi = v.min(), v.max()
    if hi > lo:
        v = (v - lo) / (hi - lo)
    else:
        v = np.clip(v, 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def _write_pgm(path, gray: np.ndarray) -> None:
    header = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + gray.tobytes())


def export_image(f: ScalarField, path) -> None:
    """8-bit binary PGM after min-max normalization (constant images map by value)."""
    if f.grid.d != 2:
        raise UnsupportedDimensionError("image export supports 2D fields only")
    _write_pgm(path, _to_gray(f.values))


def export_grid(phi: Transform, stride: int, path) -> None:
    """Raster of every stride-th grid line advected by phi (black on white)."""
    grid = phi.grid
    if grid.d != 2:
        raise UnsupportedDimensionError("grid export supports 2D transforms only")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    n0, n1 = grid.dims
    raster = np.full((n0, n1), 255, np.uint8)
    samples = 4 * max(n0, n1)
    t = torch.arange(samples, dtype=DTYPE) / samples
    lines = []
    for i in range(0, n0, stride):
        x = torch.full((samples,), i * grid.spacing[0], dtype=DTYPE)
        lines.append(torch.stack([x, t * grid.extent[1]], dim=1))
    for j in range(0, n1, stride):
        y = torch.full((samples,), j * grid.spacing[1], dtype=DTYPE)
        lines.append(torch.stack([t * grid.extent[0], y], dim=1))
    pts = torch.cat(lines)
    u_at = interp_t(phi.u.unsqueeze(0), pts.unsqueeze(0), grid)[0]
    moved = pts + u_at.transpose(0, 1)
    idx0 = torch.round(moved[:, 0] / grid.spacing[0]).long() % n0
    idx1 = torch.round(moved[:, 1] / grid.spacing[1]).long() % n1
    raster[idx0.numpy(), idx1.numpy()] = 0
    _write_pgm(path, raster)


def write_named_tensors(path, meta: dict, tensors: dict[str, torch.Tensor]) -> None:
    """Single-file container: versioned header, JSON metadata, named float64 tensors."""
    blob = bytearray()
    blob += struct.pack("<4sI", b"GCKP", 1)
    meta_bytes = json.dumps(meta).encode("utf-8")
    blob += struct.pack("<I", len(meta_bytes)) + meta_bytes
    blob += struct.pack("<I", len(tensors))
    for name, tensor in tensors.items():
        name_b = name.encode("utf-8")
        shape = tuple(tensor.shape)
        blob += struct.pack("<I", len(name_b)) + name_b
        blob += struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
        blob += np.ascontiguousarray(tensor.detach().numpy(), dtype="<f8").tobytes()
    atomic_write_bytes(path, bytes(blob))


def read_named_tensors(path) -> tuple[dict, dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    magic, version = struct.unpack_from("<4sI", raw, 0)
    if magic != b"GCKP":
        raise BadMagicError(f"{path}: bad checkpoint magic {magic!r}")
    if version != 1:
        raise FieldFormatError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off: off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off: off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        numel = int(np.prod(shape)) if shape else 1
        if off + 8 * numel > len(raw):
            raise TruncatedPayloadError(f"{path}: tensor {name!r} truncated")
        data = np.frombuffer(raw, dtype="<f8", offset=off, count=numel).reshape(shape)
        off += 8 * numel
        tensors[name] = torch.tensor(data, dtype=DTYPE)
    return meta, tensors


def write_csv(path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(x) for x in row))
    atomic_write_text(path, "\n".join(lines) + "\n")
