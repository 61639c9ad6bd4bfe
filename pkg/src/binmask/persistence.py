"""On-disk formats.

Checkpoint (``MWCK``)::

    magic "MWCK" | u32 version | u32 n, n bytes UTF-8 JSON config
    u32 tensor count | per tensor: u16 name length, name, u8 ndim, u32 dims..., u64 offset
    u64 payload length | payload of little-endian float32, offsets relative to payload start

Mask file (``MSKB``)::

    magic "MSKB" | u32 version | f32 tau | u32 n, n bytes UTF-8 JSON (plan, masking config, meta)
    u32 layer count | per layer: u16 name length, name, u32 rows, u32 cols,
                      ceil(rows*cols/8) bytes of mask bits, row-major, LSB-first, zero padded
    u32 float tensor count | per tensor: u16 name length, name, u8 ndim, u32 dims..., float32 data

All integers are little-endian. Writes go through a temp file and an atomic rename.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import _kernels as K

CKPT_MAGIC = b"MWCK"
MASK_MAGIC = b"MSKB"
VERSION = 1


class FormatError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Checkpoint:
    config: dict
    params: Dict[str, np.ndarray]

    @property
    def arch(self):
        return self.config["arch"]


@dataclass
class MaskArtifact:
    """Binarized masks of one task plus the frozen classifier they select from."""

    tau: float
    plan: dict
    masking: dict
    masks: Dict[str, np.ndarray]
    floats: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    scores: Dict[str, np.ndarray] = field(default_factory=dict)  # side-car only, never in the mask file


def _json_bytes(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def atomic_write_bytes(path, blob: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes, what: str):
        self.blob = blob
        self.pos = 0
        self.what = what

    def take(self, n, label):
        end = self.pos + n
        if end > len(self.blob):
            raise FormatError(
                f"truncated {self.what}: {label} needs {end} bytes, file has {len(self.blob)}", self.pos
            )
        chunk = self.blob[self.pos: end]
        self.pos = end
        return chunk

    def unpack(self, fmt, label):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), label))

    def name(self):
        (n,) = self.unpack("H", "name length")
        raw = self.take(n, "name")
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("name is not UTF-8", self.pos - n) from None

    def header(self, magic):
        got = self.take(4, "magic")
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
        (ver,) = self.unpack("I", "version")
        if ver != VERSION:
            raise FormatError(f"unsupported version {ver}, expected {VERSION}", 4)

    def json(self):
        (n,) = self.unpack("I", "config length")
        start = self.pos
        try:
            return json.loads(self.take(n, "config").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"config block is not valid UTF-8 JSON: {exc}", start) from None

    def done(self):
        if self.pos != len(self.blob):
            raise FormatError(f"{len(self.blob) - self.pos} trailing bytes after {self.what}", self.pos)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    cfg = _json_bytes(ckpt.config)
    parts = [CKPT_MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(ckpt.params))]
    payload = []
    offset = 0
    for name, arr in ckpt.params.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(struct.pack("<Q", offset))
        payload.append(a.tobytes())
        offset += a.nbytes
    parts.append(struct.pack("<Q", offset))
    parts.extend(payload)
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path):
    atomic_write_bytes(path, checkpoint_bytes(ckpt))


def parse_checkpoint(blob: bytes) -> Checkpoint:
    r = _Reader(blob, "checkpoint")
    r.header(CKPT_MAGIC)
    config = r.json()
    (count,) = r.unpack("I", "tensor count")
    manifest = []
    for _ in range(count):
        name = r.name()
        (ndim,) = r.unpack("B", "ndim")
        dims = r.unpack(f"{ndim}I", "dims") if ndim else ()
        (off,) = r.unpack("Q", "offset")
        manifest.append((name, dims, off, r.pos))
    (plen,) = r.unpack("Q", "payload length")
    base = r.pos
    r.take(plen, "payload")
    r.done()
    params = {}
    spans = []
    for name, dims, off, where in manifest:
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if off + nbytes > plen:
            raise FormatError(f"tensor {name!r} [{off}, {off + nbytes}) exceeds payload of {plen} bytes", where)
        spans.append((off, off + nbytes, name, where))
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=base + off)
        params[name] = arr.astype(np.float32).reshape(dims)
    spans.sort()
    for (a0, a1, an, _), (b0, b1, bn, bw) in zip(spans, spans[1:]):
        if b0 < a1:
            raise FormatError(f"tensors {an!r} and {bn!r} overlap", bw)
    return Checkpoint(config, params)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# --------------------------------------------------------------------------
# mask files
# --------------------------------------------------------------------------

def mask_payload_bytes(rows, cols) -> int:
    return (rows * cols + 7) // 8


def maskfile_bytes(art: MaskArtifact) -> bytes:
    head = _json_bytes({"plan": art.plan, "masking": art.masking, "meta": art.meta})
    parts = [MASK_MAGIC, struct.pack("<I", VERSION), struct.pack("<f", art.tau),
             struct.pack("<I", len(head)), head, struct.pack("<I", len(art.masks))]
    for name, mask in art.masks.items():
        m = np.asarray(mask)
        if m.ndim != 2:
            raise ValueError(f"mask {name!r} must be 2-D")
        if np.any((m != 0) & (m != 1)):
            raise ValueError(f"mask {name!r} is not binary")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<II", *m.shape))
        parts.append(K.pack_bits(m.reshape(-1)).tobytes())
    parts.append(struct.pack("<I", len(art.floats)))
    for name, arr in art.floats.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def save_maskfile(art: MaskArtifact, path):
    atomic_write_bytes(path, maskfile_bytes(art))


def parse_maskfile(blob: bytes) -> MaskArtifact:
    r = _Reader(blob, "mask file")
    r.header(MASK_MAGIC)
    (tau,) = r.unpack("f", "tau")
    head = r.json()
    (count,) = r.unpack("I", "layer count")
    masks = {}
    for _ in range(count):
        name = r.name()
        rows, cols = r.unpack("II", "layer dims")
        n = rows * cols
        at = r.pos
        payload = np.frombuffer(r.take(mask_payload_bytes(rows, cols), f"mask bits of {name!r}"), dtype=np.uint8)
        if n % 8 and payload[-1] >> (n % 8):
            raise FormatError(f"non-zero padding bits in mask {name!r}", at + len(payload) - 1)
        masks[name] = K.unpack_bits(payload, n).reshape(rows, cols)
    (nf,) = r.unpack("I", "float tensor count")
    floats = {}
    for _ in range(nf):
        name = r.name()
        (ndim,) = r.unpack("B", "ndim")
        dims = r.unpack(f"{ndim}I", "dims") if ndim else ()
        count_f = int(np.prod(dims, dtype=np.int64))
        raw = r.take(4 * count_f, f"floats of {name!r}")
        floats[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    r.done()
    return MaskArtifact(float(np.float32(tau)), head["plan"], head["masking"], masks, floats, head.get("meta", {}))


def load_maskfile(path) -> MaskArtifact:
    return parse_maskfile(Path(path).read_bytes())


def sniff(path) -> str:
    """``checkpoint`` or ``maskfile`` from the magic bytes."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == CKPT_MAGIC:
        return "checkpoint"
    if magic == MASK_MAGIC:
        return "maskfile"
    raise FormatError(f"unrecognised magic {magic!r} in {path}", 0)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def _fmt_value(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (dict, list, tuple)):
        return json.dumps(v, sort_keys=True, separators=(",", ":"))
    return str(v)


def render_report(fields: dict, tables: Optional[dict] = None) -> str:
    """Key/value lines followed by TAB-separated tables.

    ::

        key = value
        ...
        [table NAME]
        col1<TAB>col2
        v11<TAB>v12
        [end]
    """
    lines = ["# binmask report"]
    for k, v in fields.items():
        lines.append(f"{k} = {_fmt_value(v)}")
    for name, (cols, rows) in (tables or {}).items():
        lines.append(f"[table {name}]")
        lines.append("\t".join(cols))
        for row in rows:
            lines.append("\t".join(_fmt_value(x) for x in row))
        lines.append("[end]")
    return "\n".join(lines) + "\n"


def write_report(path, fields, tables=None):
    atomic_write_bytes(path, render_report(fields, tables).encode("utf-8"))


def parse_report(text: str):
    fields, tables = {}, {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("[table "):
            name = line[7:-1]
            cols = lines[i + 1].split("\t")
            rows = []
            i += 2
            while lines[i] != "[end]":
                rows.append(lines[i].split("\t"))
                i += 1
            tables[name] = (cols, rows)
        elif " = " in line and not line.startswith("#"):
            k, v = line.split(" = ", 1)
            fields[k] = v
        i += 1
    return fields, tables
