"""Checkpoint codec: header layout, bit-exact round trips, closed-form sizes,
two's-complement edge codes, and entropy accounting."""

import struct

import numpy as np
import pytest

from g3dpack import codec
from g3dpack.codec import (
    HEADER_BYTES,
    CodecError,
    decode,
    encode,
    lossless_headroom,
    payload_bytes_for,
    read_checkpoint,
    shannon_entropy,
    storage_bytes,
    vanilla_bytes,
    _pack_codes,
    _unpack_codes,
)
from g3dpack.quant import (
    PRESETS,
    fake_quantize,
    make_bank,
    observe_scene,
    pinned_bank,
    quantize_scene,
)
from g3dpack.scene import ATTRIBUTE_ORDER, AttributeClass, row_width
from g3dpack.synth import synthesize_scene


def observed_bank(scene, **kwargs):
    bank = make_bank("compressive", **kwargs)
    observe_scene(bank, scene)
    return bank


def test_header_layout_bytes(tmp_path, small_blob):
    scene, _, _ = small_blob
    bank = observed_bank(scene, uniform_bits=8)
    path = tmp_path / "ckpt.g3dq"
    encode(scene, bank, path)
    raw = path.read_bytes()
    assert raw[:4] == b"G3DQ"
    version, n = struct.unpack_from("<II", raw, 4)
    assert (version, n) == (1, scene.n_total)
    degree, attr_count = struct.unpack_from("<BB", raw, 12)
    assert (degree, attr_count) == (3, 6)
    off = 14
    for cls in ATTRIBUTE_ORDER:
        bits, r = struct.unpack_from("<Bd", raw, off)
        assert bits == 8
        assert r == bank[cls].r
        off += 9
    assert off == HEADER_BYTES == 68


def test_uniform8_file_size_closed_form(tmp_path, small_blob):
    scene, _, _ = small_blob
    bank = observed_bank(scene, uniform_bits=8)
    path = tmp_path / "ckpt.g3dq"
    total = encode(scene, bank, path)
    assert total == path.stat().st_size
    assert total == 68 + row_width(3) * scene.n_total
    assert total == storage_bytes(scene.n_total, 3, {c: 8 for c in ATTRIBUTE_ORDER})


@pytest.mark.parametrize("seed", range(6))
def test_file_length_matches_closed_form(tmp_path, seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 40))
    preset = ("compressive", "competitive")[seed % 2]
    scene, _, _ = synthesize_scene(seed, k, "random-blob", resolution=16)
    bank = make_bank(preset)
    observe_scene(bank, scene)
    path = tmp_path / f"ckpt{seed}.g3dq"
    total = encode(scene, bank, path)
    bits = {c: PRESETS[preset].bounds[c][1] for c in ATTRIBUTE_ORDER}
    assert total == storage_bytes(k, 3, {c: int(b) for c, b in bits.items()})


def test_round_trip_is_bitwise_fake_quantize(tmp_path, small_blob):
    scene, _, _ = small_blob
    bank = observed_bank(scene)
    path = tmp_path / "ckpt.g3dq"
    encode(scene, bank, path)
    back, meta = decode(path)
    want = quantize_scene(scene, bank)
    for cls in ATTRIBUTE_ORDER:
        np.testing.assert_array_equal(back.get_block(cls), want.get_block(cls))
    assert meta["n_gaussians"] == scene.n_total
    assert meta["sh_degree"] == 3
    assert set(meta["bits"]) == {c.value for c in ATTRIBUTE_ORDER}
    assert meta["b_bar"] == pytest.approx(
        sum(meta["bits"][c.value] * c.width(3) for c in ATTRIBUTE_ORDER) / 59
    )


def test_double_encode_is_stable(tmp_path, small_blob):
    """Encoding the decoded scene with pinned quantizers reproduces the file."""
    scene, _, _ = small_blob
    bank = observed_bank(scene)
    p1, p2 = tmp_path / "a.g3dq", tmp_path / "b.g3dq"
    encode(scene, bank, p1)
    back, meta = decode(p1)
    again = pinned_bank(
        {c: meta["bits"][c.value] for c in ATTRIBUTE_ORDER},
        {c: meta["ranges"][c.value] for c in ATTRIBUTE_ORDER},
    )
    encode(back, again, p2)
    assert p1.read_bytes() == p2.read_bytes()


@pytest.mark.parametrize("bits", [2, 3, 7, 8, 15, 16])
def test_pack_unpack_twos_complement_extremes(bits):
    lo = -(2 ** (bits - 1)) + 1
    hi = 2 ** (bits - 1) - 1
    vals = np.array([lo, hi, 0, -1, 1, lo, hi], dtype=np.int64)
    packed = _pack_codes(vals, bits)
    assert len(packed) == payload_bytes_for(len(vals), 1, bits)
    np.testing.assert_array_equal(_unpack_codes(packed, len(vals), bits), vals)


def test_pack_unpack_random_widths():
    rng = np.random.default_rng(1)
    for bits in range(2, 17):
        hi = 2 ** (bits - 1) - 1
        vals = rng.integers(-hi, hi + 1, size=257, dtype=np.int64)
        packed = _pack_codes(vals, bits)
        np.testing.assert_array_equal(_unpack_codes(packed, 257, bits), vals)


def test_encode_requires_compacted_scene(tmp_path, small_blob):
    scene, _, _ = small_blob
    stale = scene.copy()
    stale.alive[0] = False
    bank = observed_bank(scene)
    with pytest.raises(CodecError):
        encode(stale, bank, tmp_path / "x.g3dq")


def test_truncated_and_corrupt_files_rejected(tmp_path, small_blob):
    scene, _, _ = small_blob
    bank = observed_bank(scene)
    path = tmp_path / "ckpt.g3dq"
    encode(scene, bank, path)
    raw = path.read_bytes()
    bad = tmp_path / "bad.g3dq"
    bad.write_bytes(raw[:-1])
    with pytest.raises(CodecError):
        read_checkpoint(bad)
    bad.write_bytes(raw[:10])
    with pytest.raises(CodecError):
        read_checkpoint(bad)
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CodecError):
        read_checkpoint(bad)
    wrong_version = bytearray(raw)
    wrong_version[4] = 9
    bad.write_bytes(bytes(wrong_version))
    with pytest.raises(CodecError):
        read_checkpoint(bad)


def test_vanilla_bytes_convention():
    assert vanilla_bytes(10, 3) == 10 * 59 * 4
    assert vanilla_bytes(0, 3) == 0
    assert vanilla_bytes(7, 1) == 7 * (11 + 12) * 4


def test_entropy_bounds_and_extremes(tmp_path, small_blob):
    scene, _, _ = small_blob
    bank = observed_bank(scene)
    path = tmp_path / "ckpt.g3dq"
    encode(scene, bank, path)
    ckpt = read_checkpoint(path)
    report = shannon_entropy(ckpt)
    for cls in ATTRIBUTE_ORDER:
        assert 0.0 <= report.per_attr[cls] <= ckpt.bits[cls]
    assert report.weighted <= report.b_bar
    assert report.headroom_pct == pytest.approx(
        100.0 * (report.b_bar - report.weighted) / report.b_bar
    )


def test_entropy_constant_codes_is_zero(tmp_path):
    scene, _, _ = synthesize_scene(0, 4, "random-blob", resolution=16)
    flat = scene.copy()
    for cls in ATTRIBUTE_ORDER:
        block = flat.get_block(cls)
        flat.set_block(cls, np.full_like(block, 0.5))
    bank = make_bank("compressive", uniform_bits=8)
    observe_scene(bank, flat)
    path = tmp_path / "flat.g3dq"
    encode(flat, bank, path)
    report = shannon_entropy(read_checkpoint(path))
    for cls in ATTRIBUTE_ORDER:
        assert report.per_attr[cls] == 0.0
    assert report.weighted == 0.0
    assert report.headroom_pct == pytest.approx(100.0)


def test_entropy_uniform_codes_hits_width():
    """A synthetic checkpoint whose codes cycle through every symbol has
    entropy equal to the bit-width."""
    bits = {c: 3 for c in ATTRIBUTE_ORDER}
    ranges = {c: 1.0 for c in ATTRIBUTE_ORDER}
    n = 64
    codes = {}
    for cls in ATTRIBUTE_ORDER:
        d = cls.width(2)
        symbols = np.arange(-4, 4, dtype=np.int64)
        codes[cls] = np.resize(symbols, (n, d))
    ckpt = codec.QuantizedCheckpoint(
        n_gaussians=n,
        sh_degree=2,
        bits=bits,
        ranges=ranges,
        codes=codes,
        payload=b"\x00",
    )
    report = shannon_entropy(ckpt)
    for cls in ATTRIBUTE_ORDER:
        assert report.per_attr[cls] == pytest.approx(3.0, abs=1e-12)


def test_lossless_headroom_round_trip(tmp_path, small_blob):
    scene, _, _ = small_blob
    bank = observed_bank(scene)
    path = tmp_path / "ckpt.g3dq"
    encode(scene, bank, path)
    ckpt = read_checkpoint(path)
    report = lossless_headroom(ckpt)
    assert report.verified
    assert report.payload_bytes == len(ckpt.payload)
    assert report.compressed_bytes > 0
    assert report.reduction_pct == pytest.approx(
        100.0 * (1.0 - report.compressed_bytes / report.payload_bytes)
    )


def test_decode_values_snap_to_grid(tmp_path, small_blob):
    scene, _, _ = small_blob
    bank = observed_bank(scene)
    path = tmp_path / "ckpt.g3dq"
    encode(scene, bank, path)
    back, meta = decode(path)
    for cls in ATTRIBUTE_ORDER:
        b = meta["bits"][cls.value]
        scale = (2.0 ** (b - 1) - 1.0) / meta["ranges"][cls.value]
        block = back.get_block(cls)
        np.testing.assert_array_equal(
            block, np.round(block * scale) / scale
        )
        assert np.array_equal(block, fake_quantize(block, bank[cls]))
