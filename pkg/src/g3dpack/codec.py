"""Bit-exact packing of quantized checkpoints (.g3dq).

Layout: magic "G3DQ", u32 version, u32 K, u8 sh_degree, u8 attr_count,
then per attribute class {u8 bits, f64 clip range}, then per class the
two's-complement codes of all K rows bit-packed little-endian and padded
to a byte boundary.  Codes are lossless with respect to the quantized
grid, so decode(encode(scene)) renders identically to the fake-quantized
source.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import quant
from .scene import ATTRIBUTE_ORDER, AttributeClass, GaussianScene, SceneFormatError

MAGIC = b"G3DQ"
VERSION = 1
HEADER_BYTES = 4 + 4 + 4 + 1 + 1 + len(ATTRIBUTE_ORDER) * 9
MAX_BITS = 16
VANILLA_BYTES_PER_SCALAR = 4


class CodecError(ValueError):
    """Raised on malformed or truncated checkpoint files."""


@dataclass(frozen=True)
class QuantizedCheckpoint:
    """Decoded header plus per-class integer code arrays."""

    n_gaussians: int
    sh_degree: int
    bits: dict[AttributeClass, int]
    ranges: dict[AttributeClass, float]
    codes: dict[AttributeClass, np.ndarray]
    payload: bytes

    @property
    def b_bar(self) -> float:
        d = np.array([c.width(self.sh_degree) for c in ATTRIBUTE_ORDER])
        b = np.array([self.bits[c] for c in ATTRIBUTE_ORDER], dtype=np.float64)
        return float((d * b).sum() / d.sum())


def payload_bytes_for(n: int, d: int, bits: int) -> int:
    """Packed size of one class block: ceil(n*d*bits/8)."""
    return (n * d * bits + 7) // 8


def storage_bytes(n: int, sh_degree: int, bits: dict[AttributeClass, int]) -> int:
    """Closed-form file size for a compacted scene of n rows."""
    total = HEADER_BYTES
    for cls in ATTRIBUTE_ORDER:
        total += payload_bytes_for(n, cls.width(sh_degree), bits[cls])
    return total


def vanilla_bytes(n: int, sh_degree: int) -> int:
    """f32 checkpoint convention: 4 bytes per scalar, no header."""
    from .scene import row_width

    return n * row_width(sh_degree) * VANILLA_BYTES_PER_SCALAR


def _pack_codes(codes: np.ndarray, bits: int) -> bytes:
    vals = codes.astype(np.int64).ravel()
    if vals.size == 0:
        return b""
    mask = (1 << bits) - 1
    unsigned = (vals & mask).astype(np.uint64)
    shifts = np.arange(bits, dtype=np.uint64)
    bitplane = ((unsigned[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bitplane.ravel(), bitorder="little").tobytes()


def _unpack_codes(payload: bytes, count: int, bits: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    raw = np.frombuffer(payload, dtype=np.uint8)
    bitplane = np.unpackbits(raw, count=count * bits, bitorder="little")
    shifts = np.arange(bits, dtype=np.uint64)
    unsigned = (bitplane.reshape(count, bits).astype(np.uint64) << shifts).sum(
        axis=1, dtype=np.uint64
    )
    vals = unsigned.astype(np.int64)
    sign_bit = np.int64(1) << (bits - 1)
    vals[vals >= sign_bit] -= np.int64(1) << bits
    return vals


def encode(
    scene: GaussianScene,
    bank: dict[AttributeClass, quant.QuantizerState],
    path,
) -> int:
    """Write the quantized checkpoint; returns total bytes on disk."""
    if scene.n_alive != scene.n_total:
        raise CodecError("scene must be compacted before encoding")
    n = scene.n_total
    header = [MAGIC, struct.pack("<II", VERSION, n)]
    header.append(struct.pack("<BB", scene.sh_degree, len(ATTRIBUTE_ORDER)))
    blocks = []
    for cls in ATTRIBUTE_ORDER:
        state = bank[cls]
        bits = quant.bits_int(state)
        if bits > MAX_BITS:
            raise CodecError(f"bit-width {bits} over {MAX_BITS} for {cls.value}")
        codes, _, _ = quant.quantize_codes(scene.get_block(cls), state, bits)
        header.append(struct.pack("<Bd", bits, state.r))
        blocks.append(_pack_codes(codes, bits))
    data = b"".join(header) + b"".join(blocks)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def read_checkpoint(path) -> QuantizedCheckpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < HEADER_BYTES:
        raise CodecError("truncated header")
    if data[:4] != MAGIC:
        raise CodecError(f"bad magic {data[:4]!r}")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CodecError(f"unsupported version {version}")
    sh_degree, attr_count = struct.unpack_from("<BB", data, 12)
    if attr_count != len(ATTRIBUTE_ORDER):
        raise CodecError(f"expected {len(ATTRIBUTE_ORDER)} classes, got {attr_count}")
    bits: dict[AttributeClass, int] = {}
    ranges: dict[AttributeClass, float] = {}
    off = 14
    for cls in ATTRIBUTE_ORDER:
        b, r = struct.unpack_from("<Bd", data, off)
        off += 9
        if not 1 <= b <= MAX_BITS:
            raise CodecError(f"bit-width {b} out of range for {cls.value}")
        bits[cls] = b
        ranges[cls] = r
    payload = data[off:]
    expected = sum(
        payload_bytes_for(n, cls.width(sh_degree), bits[cls])
        for cls in ATTRIBUTE_ORDER
    )
    if len(payload) != expected:
        raise CodecError(
            f"payload length {len(payload)} != expected {expected}"
        )
    codes: dict[AttributeClass, np.ndarray] = {}
    pos = 0
    for cls in ATTRIBUTE_ORDER:
        d = cls.width(sh_degree)
        span = payload_bytes_for(n, d, bits[cls])
        block = _unpack_codes(payload[pos : pos + span], n * d, bits[cls])
        codes[cls] = block.reshape(n, d)
        pos += span
    return QuantizedCheckpoint(
        n_gaussians=n,
        sh_degree=sh_degree,
        bits=bits,
        ranges=ranges,
        codes=codes,
        payload=payload,
    )


def decode(path) -> tuple[GaussianScene, dict]:
    """Rebuild the dequantized scene; meta carries widths and ranges."""
    ckpt = read_checkpoint(path)
    n, degree = ckpt.n_gaussians, ckpt.sh_degree
    try:
        scene = GaussianScene(
            means=np.zeros((n, 3)),
            log_scales=np.zeros((n, 3)),
            quats=np.zeros((n, 4)),
            opacity_logits=np.zeros(n),
            sh_coeffs=np.zeros((n, (degree + 1) ** 2, 3)),
            sh_degree=degree,
            alive=np.ones(n, dtype=bool),
        )
    except SceneFormatError as exc:
        raise CodecError(str(exc)) from exc
    for cls in ATTRIBUTE_ORDER:
        b = ckpt.bits[cls]
        scale = (2.0 ** (b - 1) - 1.0) / ckpt.ranges[cls]
        scene.set_block(cls, ckpt.codes[cls] / scale)
    meta = {
        "version": VERSION,
        "n_gaussians": n,
        "sh_degree": degree,
        "bits": {c.value: ckpt.bits[c] for c in ATTRIBUTE_ORDER},
        "ranges": {c.value: ckpt.ranges[c] for c in ATTRIBUTE_ORDER},
        "b_bar": ckpt.b_bar,
    }
    return scene, meta


@dataclass(frozen=True)
class EntropyReport:
    """Zero-order code entropy per class and d-weighted overall."""

    per_attr: dict[AttributeClass, float]
    weighted: float
    b_bar: float
    headroom_pct: float


def shannon_entropy(ckpt: QuantizedCheckpoint) -> EntropyReport:
    """Empirical symbol entropy of the stored codes, in bits per scalar."""
    if ckpt.n_gaussians == 0:
        raise CodecError("empty payload has no entropy")
    per: dict[AttributeClass, float] = {}
    weights = []
    for cls in ATTRIBUTE_ORDER:
        codes = ckpt.codes[cls].ravel()
        _, counts = np.unique(codes, return_counts=True)
        p = counts / counts.sum()
        per[cls] = float(-(p * np.log2(p)).sum())
        weights.append(cls.width(ckpt.sh_degree))
    d = np.array(weights, dtype=np.float64)
    h = np.array([per[c] for c in ATTRIBUTE_ORDER])
    weighted = float((d * h).sum() / d.sum())
    b_bar = ckpt.b_bar
    return EntropyReport(
        per_attr=per,
        weighted=weighted,
        b_bar=b_bar,
        headroom_pct=100.0 * (b_bar - weighted) / b_bar,
    )


@dataclass(frozen=True)
class HeadroomReport:
    """General-purpose lossless compression measured on the payload."""

    payload_bytes: int
    compressed_bytes: int
    reduction_pct: float
    verified: bool
    status: str


def lossless_headroom(ckpt: QuantizedCheckpoint) -> HeadroomReport:
    if not ckpt.payload:
        raise CodecError("empty payload has no compression headroom")
    compressed = zlib.compress(ckpt.payload, level=9)
    verified = zlib.decompress(compressed) == ckpt.payload
    return HeadroomReport(
        payload_bytes=len(ckpt.payload),
        compressed_bytes=len(compressed),
        reduction_pct=100.0 * (1.0 - len(compressed) / len(ckpt.payload)),
        verified=verified,
        status="ok",
    )
