"""Bit-exact file formats: tensor files, checkpoints, PGM previews,
dataset manifests, and key=value config files."""
from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .model import ModelConfig
from .tensor import F32, F64, Tensor4

_TENSOR_MAGIC = b"OT4\0"
_CKPT_MAGIC = b"OCKP"
_CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_tensor(path, t: Tensor4) -> None:
    n, c, h, w = t.dims
    code = 0 if t.dtype == F32 else 1
    header = _TENSOR_MAGIC + struct.pack("<BBHIIII", code, 0, 0, n, c, h, w)
    payload = np.ascontiguousarray(t.data, dtype=_CODE_DTYPES[code]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_tensor(path) -> Tensor4:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24 or blob[:4] != _TENSOR_MAGIC:
        raise FormatError(f"{path}: not a tensor file (bad magic or truncated header)")
    code, _r1, _r2, n, c, h, w = struct.unpack("<BBHIIII", blob[4:24])
    if code not in _CODE_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dtype = _CODE_DTYPES[code]
    expected = n * c * h * w * dtype.itemsize
    payload = blob[24:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(n, c, h, w)
    return Tensor4(arr.astype(dtype.newbyteorder("=")))


def _pack_named_tensors(tensors: dict[str, Tensor4]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        code = 0 if t.dtype == F32 else 1
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BBIIII", code, 4, *t.dims))
        parts.append(np.ascontiguousarray(t.data, dtype=_CODE_DTYPES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, nbytes: int) -> bytes:
        if self.off + nbytes > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.off: self.off + nbytes]
        self.off += nbytes
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _unpack_named_tensors(r: _Reader) -> dict[str, Tensor4]:
    out = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        code, ndim, n, c, h, w = struct.unpack("<BBIIII", r.take(18))
        if code not in _CODE_DTYPES or ndim != 4:
            raise FormatError(f"{r.path}: bad tensor header for {name!r}")
        dtype = _CODE_DTYPES[code]
        payload = r.take(n * c * h * w * dtype.itemsize)
        arr = np.frombuffer(payload, dtype=dtype).reshape(n, c, h, w)
        out[name] = Tensor4(arr.astype(dtype.newbyteorder("=")))
    return out


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, Tensor4]
    bn_stats: dict[str, Tensor4]
    opt_state: dict[str, Tensor4] | None
    epoch: int


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    cfg_text = ckpt.config.canonical().encode("utf-8")
    digest = hashlib.sha256(cfg_text).digest()
    parts = [
        _CKPT_MAGIC,
        struct.pack("<I", _CKPT_VERSION),
        digest,
        struct.pack("<I", len(cfg_text)),
        cfg_text,
        struct.pack("<IBxxx", ckpt.epoch, 1 if ckpt.opt_state is not None else 0),
        _pack_named_tensors(ckpt.params),
        _pack_named_tensors(ckpt.bn_stats),
    ]
    if ckpt.opt_state is not None:
        parts.append(_pack_named_tensors(ckpt.opt_state))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def _config_from_canonical(text: str) -> ModelConfig:
    fields = dict(item.split("=", 1) for item in text.split(";"))
    try:
        return ModelConfig(
            variant=fields["variant"],
            in_channels=int(fields["in"]),
            levels=int(fields["levels"]),
            channels=tuple(int(v) for v in fields["channels"].split(",")),
            decoder_compress=tuple(int(v) for v in fields["compress"].split(",")),
            image_h=int(fields["h"]),
            image_w=int(fields["w"]),
            bridge_atrous_kernel=int(fields["atrous_k"]),
            bridge_dilation=int(fields["d"]),
            bridge_separable_kernel=int(fields["sep_k"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"unparseable checkpoint config: {text!r}") from exc


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(4) != _CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    version = r.u32()
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    digest = r.take(32)
    cfg_text = r.take(r.u32()).decode("utf-8")
    if hashlib.sha256(cfg_text.encode("utf-8")).digest() != digest:
        raise FormatError(f"{path}: config digest mismatch (corrupt checkpoint)")
    epoch, has_opt = struct.unpack("<IBxxx", r.take(8))
    config = _config_from_canonical(cfg_text)
    params = _unpack_named_tensors(r)
    bn_stats = _unpack_named_tensors(r)
    opt_state = _unpack_named_tensors(r) if has_opt else None
    if r.off != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.off} trailing bytes")
    return Checkpoint(config=config, params=params, bn_stats=bn_stats,
                      opt_state=opt_state, epoch=epoch)


def save_pgm(path, probabilities: np.ndarray) -> None:
    """8-bit binary PGM of a (h, w) probability map; values are scaled by
    255 and rounded half-up."""
    arr = np.asarray(probabilities, dtype=np.float64)
    if arr.ndim != 2:
        raise FormatError(f"PGM needs a 2-D array, got {arr.ndim}-D")
    h, w = arr.shape
    bytes_ = np.floor(arr * 255.0 + 0.5).clip(0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(bytes_.tobytes())


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise FormatError(f"{path}: not an 8-bit binary PGM")
    try:
        w, h = (int(v) for v in parts[1].split())
    except ValueError as exc:
        raise FormatError(f"{path}: bad PGM dimensions line") from exc
    payload = parts[3]
    if len(payload) != h * w:
        raise FormatError(f"{path}: PGM payload is {len(payload)} bytes, expected {h * w}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    mask_path: str
    split: str


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_path", "mask_path", "split"])
        for e in entries:
            writer.writerow([e.image_path, e.mask_path, e.split])


def read_manifest(path) -> list[ManifestEntry]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["image_path", "mask_path", "split"]:
        raise FormatError(f"{path}: bad manifest header")
    out = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise FormatError(f"{path}: line {i} has {len(row)} fields, expected 3")
        out.append(ManifestEntry(*row))
    return out


def parse_config_file(path) -> dict[str, str]:
    """key=value per line; blank lines and #-comments ignored."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno} is not key=value: {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
