"""RVOL volume files: one UTF-8 JSON header line, then a little-endian payload."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import VolumeFormatError, logger

DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
KINDS = ("ct", "labels")


@dataclass(frozen=True)
class VolumeHeader:
    dtype: str
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    kind: str
    format: str

    def to_json(self) -> str:
        return json.dumps({
            "dtype": self.dtype,
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "kind": self.kind,
            "format": self.format,
        })


def write_volume(path, data, spacing, kind="ct", format_tag="none"):
    """Write ``data`` as RVOL: f32 for CT, u8 for label volumes."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise VolumeFormatError(f"RVOL volumes are D×H×W, got shape {data.shape}")
    if kind not in KINDS:
        raise VolumeFormatError(f"Unknown volume kind '{kind}'")

    if kind == "labels":
        if data.size and (data.min() < 0 or data.max() > 255):
            raise VolumeFormatError("Label volumes must fit in u8")
        dtype = "u8"
    else:
        dtype = "f32"

    header = VolumeHeader(
        dtype=dtype,
        dims=tuple(int(d) for d in data.shape),
        spacing=tuple(float(s) for s in spacing),
        kind=kind,
        format=str(format_tag),
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header.to_json().encode("utf-8") + b"\n")
        f.write(np.ascontiguousarray(data, dtype=DTYPES[dtype]).tobytes())
    logger.debug(f"Wrote {kind} volume {path} dims={header.dims}")
    return path


def read_volume(path) -> tuple[np.ndarray, VolumeHeader]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise VolumeFormatError(f"Cannot read volume {path}: {e}") from e

    newline = raw.find(b"\n")
    if newline < 0:
        raise VolumeFormatError(f"{path}: missing RVOL header line")
    try:
        meta = json.loads(raw[:newline].decode("utf-8"))
        header = VolumeHeader(
            dtype=meta["dtype"],
            dims=tuple(int(d) for d in meta["dims"]),
            spacing=tuple(float(s) for s in meta["spacing"]),
            kind=meta["kind"],
            format=meta["format"],
        )
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise VolumeFormatError(f"{path}: malformed RVOL header ({e})") from e

    if header.dtype not in DTYPES:
        raise VolumeFormatError(f"{path}: unsupported dtype '{header.dtype}'")
    if len(header.dims) != 3:
        raise VolumeFormatError(f"{path}: dims must have three entries")

    dtype = DTYPES[header.dtype]
    payload = raw[newline + 1:]
    expected = int(np.prod(header.dims)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(f"{path}: payload holds {len(payload)} bytes, header implies {expected}")

    data = np.frombuffer(payload, dtype=dtype).reshape(header.dims).copy()
    if header.dtype == "f32":
        data = data.astype(np.float32)
    return data, header
