"""Binary checkpoint format ("MPCK").

Layout (little-endian): magic, u16 version, u16 digest length + ASCII digest,
u64 step, i64 seed, u8 flags (bit 0: rate table present, bit 1: learnable),
u32 tensor count, then per tensor: u32 name length, UTF-8 name, u32 ndim,
ndim x u64 shape, float64 values in C order.
"""

import struct
from dataclasses import dataclass

import numpy as np

from metaperser.errors import FormatError
from metaperser.meta import LSLRTable
from metaperser.model import PARAM_NAMES, ModelParams

MAGIC = b"MPCK"
VERSION = 1
RATES = "lslr.rates"


@dataclass(frozen=True)
class Checkpoint:
    params: ModelParams
    lslr: LSLRTable = None
    step: int = 0
    digest: str = ""
    seed: int = 0

    def equals(self, other):
        """Bitwise equality of every field."""
        same_rates = (self.lslr is None and other.lslr is None) or (
            self.lslr is not None
            and other.lslr is not None
            and self.lslr.learnable == other.lslr.learnable
            and self.lslr.rates.shape == other.lslr.rates.shape
            and self.lslr.rates.tobytes() == other.lslr.rates.tobytes()
        )
        return (
            self.params.equals(other.params)
            and same_rates
            and (self.step, self.digest, self.seed) == (other.step, other.digest, other.seed)
        )


def encode(ck):
    tensors = [(n, ck.params[n]) for n in PARAM_NAMES]
    flags = 0
    if ck.lslr is not None:
        tensors.append((RATES, ck.lslr.rates))
        flags = 1 | (2 if ck.lslr.learnable else 0)
    digest = ck.digest.encode("ascii")
    out = [MAGIC, struct.pack("<HH", VERSION, len(digest)), digest, struct.pack("<QqBI", ck.step, ck.seed, flags, len(tensors))]
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data, source):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.source}: truncated checkpoint at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def decode(data, source="<bytes>"):
    r = _Reader(data, source)
    if r.take(4) != MAGIC:
        raise FormatError(f"{source}: not a checkpoint (bad magic)")
    version, dlen = r.unpack("<HH")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    digest = r.take(dlen).decode("ascii")
    step, seed, flags, count = r.unpack("<QqBI")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise FormatError(f"{source}: {len(data) - r.pos} trailing bytes")
    missing = [n for n in PARAM_NAMES if n not in tensors]
    if missing:
        raise FormatError(f"{source}: missing tensors {missing}")
    lslr = None
    if flags & 1:
        if RATES not in tensors:
            raise FormatError(f"{source}: rate table flagged but absent")
        lslr = LSLRTable(tensors[RATES], learnable=bool(flags & 2))
    return Checkpoint(ModelParams({n: tensors[n] for n in PARAM_NAMES}), lslr, step, digest, seed)


def save(ck, path):
    with open(path, "wb") as fh:
        fh.write(encode(ck))


def load(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise FormatError(f"checkpoint not found: {path}") from None
    return decode(data, str(path))
