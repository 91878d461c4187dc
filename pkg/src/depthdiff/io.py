"""Bit-exact file formats: PFM float maps, 16-bit PGM previews, toy denoiser weights.

PFM layout: an ``Pf`` (grayscale) or ``PF`` (RGB) line, a ``W H`` line, a
scale line whose sign gives the byte order (negative = little-endian), then
4-byte floats row-major with the bottom image row first.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .grid import Field2D, FieldStack
from .schedule import Parameterization
from .toy.network import ToyArchitecture, ToyDenoiser

PathLike = Union[str, os.PathLike]

DENOISER_MAGIC = b"DDTOYNET"
DENOISER_VERSION = 1
_DENOISER_HEADER = struct.Struct("<8sH5IBI")
_PARAM_TAGS = {Parameterization.EPSILON: 0, Parameterization.V: 1, Parameterization.X0: 2}
_TAG_PARAMS = {v: k for k, v in _PARAM_TAGS.items()}


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


def atomic_write(path: PathLike, payload: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(eq=False)
class PfmImage:
    """``data`` is ``float32`` in top-down row order, shape ``(H, W)`` or ``(H, W, 3)``."""

    data: np.ndarray
    scale: float = 1.0
    little_endian: bool = True

    @property
    def color(self) -> bool:
        return self.data.ndim == 3


def encode_pfm(img: PfmImage) -> bytes:
    data = np.asarray(img.data)
    if data.dtype != np.float32:
        raise FormatError("PFM payload must be float32")
    if data.ndim == 2:
        kind = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        kind = b"PF"
    else:
        raise FormatError(f"unsupported PFM array shape {data.shape}")
    if not img.scale > 0:
        raise FormatError("PFM scale magnitude must be positive")
    h, w = data.shape[:2]
    signed = -img.scale if img.little_endian else img.scale
    header = kind + b"\n" + f"{w} {h}\n".encode() + f"{signed!r}\n".encode()
    dtype = "<f4" if img.little_endian else ">f4"
    return header + np.ascontiguousarray(data[::-1]).astype(dtype).tobytes()


def _read_token_line(buf: bytes, pos: int) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise FormatError("truncated PFM header")
    try:
        return buf[pos:end].decode("ascii").strip(), end + 1
    except UnicodeDecodeError as exc:
        raise FormatError("non-ASCII PFM header") from exc


def decode_pfm(buf: bytes) -> PfmImage:
    kind, pos = _read_token_line(buf, 0)
    if kind not in ("Pf", "PF"):
        raise FormatError(f"not a PFM file (identifier {kind[:8]!r})")
    dims, pos = _read_token_line(buf, pos)
    parts = dims.split()
    try:
        w, h = (int(p) for p in parts)
    except ValueError as exc:
        raise FormatError(f"bad PFM dimensions line {dims!r}") from exc
    if w < 1 or h < 1:
        raise FormatError("PFM dimensions must be positive")
    scale_line, pos = _read_token_line(buf, pos)
    try:
        signed = float(scale_line)
    except ValueError as exc:
        raise FormatError(f"bad PFM scale line {scale_line!r}") from exc
    if signed == 0 or not np.isfinite(signed):
        raise FormatError("PFM scale must be finite and non-zero")
    channels = 3 if kind == "PF" else 1
    expected = w * h * channels * 4
    if len(buf) - pos != expected:
        raise FormatError(f"PFM payload has {len(buf) - pos} bytes, expected {expected}")
    little = signed < 0
    data = np.frombuffer(buf, dtype="<f4" if little else ">f4", offset=pos).astype(np.float32)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return PfmImage(data.reshape(shape)[::-1].copy(), abs(signed), little)


def read_pfm(path: PathLike) -> PfmImage:
    return decode_pfm(Path(path).read_bytes())


def write_pfm(path: PathLike, img: PfmImage) -> None:
    atomic_write(path, encode_pfm(img))


def read_field(path: PathLike) -> Union[Field2D, FieldStack]:
    """Grayscale PFM -> ``Field2D``; RGB PFM -> 3-channel ``FieldStack``."""
    img = read_pfm(path)
    data = img.data.astype(np.float64)
    if img.color:
        return FieldStack(data.transpose(2, 0, 1))
    return Field2D(data)


def write_field(path: PathLike, field: Union[Field2D, FieldStack, np.ndarray]) -> None:
    values = np.asarray(getattr(field, "values", field))
    if values.ndim == 3:
        if values.shape[0] != 3:
            raise FormatError("PFM stores 1 or 3 channels")
        values = values.transpose(1, 2, 0)
    write_pfm(path, PfmImage(values.astype(np.float32)))


def encode_pgm16(values: np.ndarray, lo: float | None = None, hi: float | None = None) -> bytes:
    """Quantize a 2D map to binary 16-bit big-endian PGM over ``[lo, hi]``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise FormatError("PGM previews are single-channel")
    lo = float(values.min()) if lo is None else lo
    hi = float(values.max()) if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    q = np.clip(np.round((values - lo) / span * 65535.0), 0, 65535).astype(">u2")
    h, w = values.shape
    return f"P5\n{w} {h}\n65535\n".encode() + q.tobytes()


def decode_pgm16(buf: bytes) -> np.ndarray:
    magic, pos = _read_token_line(buf, 0)
    if magic != "P5":
        raise FormatError("not a binary PGM file")
    dims, pos = _read_token_line(buf, pos)
    w, h = (int(p) for p in dims.split())
    maxval, pos = _read_token_line(buf, pos)
    if int(maxval) != 65535:
        raise FormatError("only 16-bit PGM is supported")
    if len(buf) - pos != w * h * 2:
        raise FormatError("PGM payload size mismatch")
    return np.frombuffer(buf, dtype=">u2", offset=pos).reshape(h, w).astype(np.uint16)


def encode_denoiser(model: ToyDenoiser) -> bytes:
    a = model.arch
    header = _DENOISER_HEADER.pack(
        DENOISER_MAGIC,
        DENOISER_VERSION,
        a.latent_channels,
        a.cond_channels,
        a.width,
        a.hidden_layers,
        a.emb_dim,
        _PARAM_TAGS[model.parameterization],
        a.n_params,
    )
    return header + model.params.astype("<f4").tobytes()


def decode_denoiser(buf: bytes) -> ToyDenoiser:
    if len(buf) < _DENOISER_HEADER.size:
        raise FormatError("truncated denoiser file")
    magic, version, lat, cond, width, layers, emb, tag, n = _DENOISER_HEADER.unpack_from(buf)
    if magic != DENOISER_MAGIC:
        raise FormatError("not a toy denoiser file")
    if version != DENOISER_VERSION:
        raise FormatError(f"unsupported denoiser file version {version}")
    if tag not in _TAG_PARAMS:
        raise FormatError(f"unknown parameterization tag {tag}")
    arch = ToyArchitecture(lat, cond, width, layers, emb)
    if arch.n_params != n:
        raise FormatError("parameter count does not match the architecture")
    payload = buf[_DENOISER_HEADER.size :]
    if len(payload) != 4 * n:
        raise FormatError("denoiser payload size mismatch")
    params = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return ToyDenoiser(arch, params, _TAG_PARAMS[tag])


def save_denoiser(path: PathLike, model: ToyDenoiser) -> None:
    atomic_write(path, encode_denoiser(model))


def load_denoiser(path: PathLike) -> ToyDenoiser:
    return decode_denoiser(Path(path).read_bytes())
