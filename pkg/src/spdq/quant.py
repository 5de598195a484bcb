"""Group-wise low-bit weight codec with optional two-level scale compression.

A 2-d weight tensor is cut into contiguous groups of ``group_size`` along the
input dimension of each output row (a short tail group absorbs any remainder).
Each group gets an asymmetric affine code:

    s = (hi - lo) / (2^b - 1)        z = clamp(round(-lo / s), 0, 2^b - 1)
    q = clamp(round_to_nearest_even(w / s) + z, 0, 2^b - 1)

where ``[lo, hi]`` is the group's value range widened to include zero. The
widening keeps z inside its unsigned b-bit budget for groups that sit entirely
on one side of zero, which in turn keeps the round-trip error of every weight
within half a quantization step; for zero-spanning groups (the usual case for
trained weights) it changes nothing, and for constant groups it degrades to
the epsilon-guarded rule that reconstructs the constant exactly.

Scales are stored either as raw little-endian float16 (single level) or, in
bilevel mode, themselves group-quantized to ``scale_bits`` codes over groups
of ``scale_group`` scales, with one float16 second-level scale and one
``scale_bits``-bit second-level zero point per scale group. Zero points of the
weight groups are never quantized further. All bitstreams pack values
LSB-first within each byte.

Per-weight storage cost in bits:

    single level:  b + zp_bits / G + 16 / G
    bilevel:       b + zp_bits / G + b_s / G + (16 + b_s) / (G * G_q)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff
from .autodiff import Tensor

__all__ = [
    "ClipRange",
    "GroupParams",
    "PackedTensor",
    "PayloadError",
    "QuantSpec",
    "average_bitwidth",
    "compute_group_params",
    "dequantize_group",
    "dequantize_tensor",
    "element_quant_params",
    "fake_quantize",
    "pack_bits",
    "quantize_dequantize",
    "quantize_group",
    "quantize_tensor",
    "unpack_bits",
    "unpack_tensor",
]

# Floor for a degenerate (all-equal, possibly all-zero) group range.
RANGE_EPS = 1e-8

# Stored scales round upward: a stored scale below the raw one would shrink
# the representable span of its group, and range-edge weights would clamp with
# error beyond half a step. Rounding up costs at most one float16 ulp (one
# second-level step in bilevel mode) and keeps stored scales strictly positive.
_F16_TINY = float(np.finfo(np.float16).smallest_subnormal)


def _f16_ceil(x: np.ndarray) -> np.ndarray:
    f = np.asarray(x).astype(np.float16)
    low = f.astype(np.float64) < x
    if low.any():
        f[low] = np.nextafter(f[low], np.float16(np.inf))
    if not np.all(np.isfinite(f.astype(np.float64))):
        raise ValueError("scale overflows float16 storage")
    return f

_ROUNDINGS = ("nearest_even", "floor")


class PayloadError(ValueError):
    """A packed payload fails validation (wrong length, bad padding, corrupt scales)."""


@dataclass(frozen=True)
class QuantSpec:
    """Static description of one weight-tensor quantization configuration.

    ``scale_bits`` and ``scale_group`` switch on bilevel scale storage and
    must be given together. ``zero_point_bits`` is the storage width of the
    per-group zero point (defaults to ``bits``; 16 reproduces configurations
    that keep full-width offsets).
    """

    bits: int
    group_size: int
    scale_bits: int | None = None
    scale_group: int | None = None
    rounding: str = "nearest_even"
    zero_point_bits: int | None = None

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")
        if (self.scale_bits is None) != (self.scale_group is None):
            raise ValueError("scale_bits and scale_group must be given together")
        if self.scale_bits is not None:
            if not 4 <= self.scale_bits <= 8:
                raise ValueError(f"scale_bits must be in [4, 8], got {self.scale_bits}")
            if self.scale_group < 1:
                raise ValueError(f"scale_group must be >= 1, got {self.scale_group}")
        if self.rounding not in _ROUNDINGS:
            raise ValueError(f"rounding must be one of {_ROUNDINGS}, got {self.rounding!r}")
        if self.zero_point_bits is not None and not self.bits <= self.zero_point_bits <= 16:
            raise ValueError(
                f"zero_point_bits must be in [{self.bits}, 16], got {self.zero_point_bits}")

    @property
    def bilevel(self) -> bool:
        return self.scale_bits is not None

    @property
    def zp_bits(self) -> int:
        return self.bits if self.zero_point_bits is None else self.zero_point_bits

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class ClipRange:
    """Inclusive clamp bounds applied to a weight tensor before coding."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise ValueError(f"clip bounds must be finite, got ({self.alpha}, {self.beta})")
        if self.alpha >= self.beta:
            raise ValueError(f"clip range must satisfy alpha < beta, got ({self.alpha}, {self.beta})")


@dataclass(frozen=True)
class GroupParams:
    """Affine code parameters of a single group."""

    scale: float
    zero_point: int
    bits: int


@dataclass
class PackedTensor:
    """One tensor's quantized payload, self-describing given shape and spec.

    ``codes``, ``zero_points`` and ``scale_payload`` are independent LSB-first
    bitstreams (scale payloads additionally carry raw float16 sections).
    """

    name: str
    shape: tuple[int, int]
    spec: QuantSpec
    codes: bytes
    zero_points: bytes
    scale_payload: bytes

    @property
    def n_elements(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def n_groups(self) -> int:
        d_out, d_in = self.shape
        return d_out * _groups_per_row(d_in, self.spec.group_size)

    def payload_nbytes(self) -> int:
        return len(self.codes) + len(self.zero_points) + len(self.scale_payload)


# ---------------------------------------------------------------------------
# bitstream helpers

def pack_bits(values: np.ndarray, bits: int) -> bytes:
    """Pack unsigned integers into an LSB-first bitstream."""
    values = np.asarray(values, dtype=np.uint32)
    if values.size == 0:
        return b""
    if values.max() >= (1 << bits):
        raise ValueError(f"value does not fit in {bits} bits")
    shifts = np.arange(bits, dtype=np.uint32)
    bitmat = ((values[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bitmat.reshape(-1), bitorder="little").tobytes()


def unpack_bits(buf: bytes, bits: int, count: int, *, section: str = "bitstream",
                base_offset: int = 0) -> np.ndarray:
    """Read ``count`` ``bits``-wide unsigned integers from an LSB-first stream.

    Raises PayloadError on length mismatch or nonzero padding bits, reporting
    byte offsets relative to ``base_offset``.
    """
    expected = (count * bits + 7) // 8
    if len(buf) != expected:
        raise PayloadError(
            f"{section}: expected {expected} bytes at offset {base_offset}, got {len(buf)}")
    if count == 0:
        return np.zeros(0, dtype=np.uint32)
    raw = np.frombuffer(buf, dtype=np.uint8)
    bitarr = np.unpackbits(raw, bitorder="little")
    used = count * bits
    if bitarr[used:].any():
        raise PayloadError(
            f"{section}: nonzero padding bits near offset {base_offset + used // 8}")
    weights = (np.uint32(1) << np.arange(bits, dtype=np.uint32))
    return (bitarr[:used].reshape(count, bits).astype(np.uint32) * weights).sum(axis=1)


# ---------------------------------------------------------------------------
# group parameters

def _affine_params(lo: np.ndarray, hi: np.ndarray, bits: int):
    """Vectorized scale / zero-point from zero-widened group ranges."""
    lo = np.minimum(lo, 0.0)
    hi = np.maximum(hi, 0.0)
    levels = (1 << bits) - 1
    scale = np.maximum(hi - lo, RANGE_EPS) / levels
    zero = np.clip(np.rint(-lo / scale), 0, levels).astype(np.int64)
    return scale, zero


def compute_group_params(values: Sequence[float] | np.ndarray, bits: int) -> GroupParams:
    """Affine parameters for one group of weights."""
    if not 2 <= bits <= 8:
        raise ValueError(f"bits must be in [2, 8], got {bits}")
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot compute parameters of an empty group")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite values in group")
    scale, zero = _affine_params(np.min(v), np.max(v), bits)
    return GroupParams(scale=float(scale), zero_point=int(zero), bits=bits)


def _apply_rounding(w_over_s: np.ndarray, zero, rounding: str) -> np.ndarray:
    if rounding == "nearest_even":
        return np.rint(w_over_s) + zero
    return np.floor(w_over_s + zero)  # floor applies to w/s + z jointly


def quantize_group(values: Sequence[float] | np.ndarray, params: GroupParams,
                   rounding: str = "nearest_even") -> np.ndarray:
    """Codes for one group under fixed parameters."""
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite values in group")
    q = _apply_rounding(v / params.scale, params.zero_point, rounding)
    return np.clip(q, 0, (1 << params.bits) - 1).astype(np.uint8)


def dequantize_group(codes: np.ndarray, params: GroupParams) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.size and codes.max() > (1 << params.bits) - 1:
        raise ValueError(f"code exceeds {params.bits}-bit range")
    return ((codes.astype(np.float64) - params.zero_point) * params.scale).astype(np.float32)


# ---------------------------------------------------------------------------
# tensor-level quantization

def _groups_per_row(d_in: int, group_size: int) -> int:
    return (d_in + group_size - 1) // group_size


def _group_counts(d_in: int, group_size: int) -> list[int]:
    k_full, tail = divmod(d_in, group_size)
    return [group_size] * k_full + ([tail] if tail else [])


def _tensor_group_ranges(w: np.ndarray, G: int):
    """Zero-widened per-group (lo, hi) arrays of shape (d_out, groups_per_row)."""
    d_out, d_in = w.shape
    k_full, tail = divmod(d_in, G)
    los, his = [], []
    if k_full:
        full = w[:, :k_full * G].reshape(d_out, k_full, G)
        los.append(full.min(axis=2))
        his.append(full.max(axis=2))
    if tail:
        los.append(w[:, k_full * G:].min(axis=1, keepdims=True))
        his.append(w[:, k_full * G:].max(axis=1, keepdims=True))
    if not los:
        empty = np.zeros((d_out, 0))
        return empty, empty
    lo = np.concatenate(los, axis=1)
    hi = np.concatenate(his, axis=1)
    return np.minimum(lo, 0.0), np.maximum(hi, 0.0)


def _store_scales(scales_flat: np.ndarray, spec: QuantSpec):
    """Encode first-level scales; returns (payload bytes, reconstructed scales).

    Every stored representation rounds scales upward, so the reconstruction
    never falls below the raw scale (see _f16_ceil).
    """
    if not spec.bilevel:
        f16 = _f16_ceil(scales_flat)
        return f16.astype("<f2").tobytes(), f16.astype(np.float64)

    n = scales_flat.size
    Gq = spec.scale_group
    bs = spec.scale_bits
    levels2 = (1 << bs) - 1
    if n and np.any(scales_flat <= 0):
        raise ValueError("non-positive first-level scale in bilevel encoding")
    n_sg = _groups_per_row(n, Gq)
    counts = _group_counts(n, Gq)
    # Scales are positive, so each scale group's zero-widened range starts at
    # zero and every second-level zero point is 0.
    group_max = np.array([scales_flat[i * Gq:i * Gq + c].max() for i, c in enumerate(counts)])
    s2_f16 = _f16_ceil(np.maximum(group_max, RANGE_EPS) / levels2)
    z2 = np.zeros(n_sg, dtype=np.int64)
    s2_recon = s2_f16.astype(np.float64)
    s2_elem = np.repeat(s2_recon, counts)
    codes2 = np.clip(np.ceil(scales_flat / s2_elem), 1, levels2).astype(np.uint32)
    recon = codes2.astype(np.float64) * s2_elem
    payload = pack_bits(codes2, bs) + s2_f16.astype("<f2").tobytes() + pack_bits(z2, bs)
    return payload, recon


def _scale_section_sizes(n_groups: int, spec: QuantSpec) -> tuple[int, ...]:
    if not spec.bilevel:
        return (2 * n_groups,)
    n_sg = _groups_per_row(n_groups, spec.scale_group)
    bs = spec.scale_bits
    return ((n_groups * bs + 7) // 8, 2 * n_sg, (n_sg * bs + 7) // 8)


def _load_scales(payload: bytes, n_groups: int, spec: QuantSpec, base_offset: int) -> np.ndarray:
    sizes = _scale_section_sizes(n_groups, spec)
    if len(payload) != sum(sizes):
        raise PayloadError(
            f"scale section: expected {sum(sizes)} bytes at offset {base_offset}, "
            f"got {len(payload)}")
    if not spec.bilevel:
        scales = np.frombuffer(payload, dtype="<f2").astype(np.float64)
        _check_scales(scales, base_offset)
        return scales
    Gq, bs = spec.scale_group, spec.scale_bits
    n_sg = _groups_per_row(n_groups, Gq)
    a, b = sizes[0], sizes[0] + sizes[1]
    codes2 = unpack_bits(payload[:a], bs, n_groups,
                         section="scale codes", base_offset=base_offset)
    s2 = np.frombuffer(payload[a:b], dtype="<f2").astype(np.float64)
    z2 = unpack_bits(payload[b:], bs, n_sg,
                     section="second-level zero points", base_offset=base_offset + b)
    counts = _group_counts(n_groups, Gq)
    scales = (codes2.astype(np.float64) - np.repeat(z2, counts)) * np.repeat(s2, counts)
    _check_scales(scales, base_offset)
    return scales


def _check_scales(scales: np.ndarray, base_offset: int) -> None:
    bad = ~(np.isfinite(scales) & (scales > 0))
    if bad.any():
        i = int(np.argmax(bad))
        raise PayloadError(
            f"bad reconstructed scale at group {i} (section offset {base_offset}): {scales[i]}")


def _expand(groups_2d: np.ndarray, counts: list[int]) -> np.ndarray:
    return np.repeat(groups_2d, counts, axis=1)


def _prepare(w: np.ndarray, spec: QuantSpec, clip: ClipRange | None):
    w = np.asarray(w)
    if w.ndim != 2:
        raise ValueError(f"expected a 2-d weight tensor, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("non-finite values in weight tensor")
    wc = w.astype(np.float64)
    if clip is not None:
        wc = np.clip(wc, clip.alpha, clip.beta)
    return wc


def _quantize_arrays(wc: np.ndarray, spec: QuantSpec,
                     rounding_mask: np.ndarray | None = None):
    """Shared coding path; returns (codes, zero points, stored scales, payload).

    Zero points are computed against the stored (reconstructed) scale, not the
    raw one, so codes and decoder agree on the grid placement exactly.
    """
    d_out, d_in = wc.shape
    counts = _group_counts(d_in, spec.group_size)
    lo, hi = _tensor_group_ranges(wc, spec.group_size)
    raw = np.maximum(hi - lo, RANGE_EPS) / spec.levels
    scale_payload, recon_flat = _store_scales(raw.reshape(-1), spec)
    recon_2d = recon_flat.reshape(raw.shape)
    zeros_2d = np.clip(np.rint(-lo / recon_2d), 0, spec.levels).astype(np.int64)
    s_elem = _expand(recon_2d, counts)
    z_elem = _expand(zeros_2d, counts)
    if rounding_mask is None:
        q = _apply_rounding(wc / s_elem, z_elem, spec.rounding)
    else:
        m = np.asarray(rounding_mask)
        if m.shape != wc.shape:
            raise ValueError(f"rounding mask shape {m.shape} does not match weights {wc.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("rounding mask entries must be 0 or 1")
        q = np.floor(wc / s_elem) + m + z_elem
    codes = np.clip(q, 0, spec.levels).astype(np.uint8)
    return codes, zeros_2d, recon_2d, scale_payload


def element_quant_params(w: np.ndarray, spec: QuantSpec, clip: ClipRange | None = None):
    """Per-element stored scale and zero-point arrays (same shape as ``w``).

    These are the parameters the packed form will carry, so callers can build
    alternative code assignments (adaptive rounding) against the exact grid
    the decoder will use.
    """
    wc = _prepare(w, spec, clip)
    counts = _group_counts(wc.shape[1], spec.group_size)
    lo, hi = _tensor_group_ranges(wc, spec.group_size)
    raw = np.maximum(hi - lo, RANGE_EPS) / spec.levels
    _, recon_flat = _store_scales(raw.reshape(-1), spec)
    recon_2d = recon_flat.reshape(raw.shape)
    zeros_2d = np.clip(np.rint(-lo / recon_2d), 0, spec.levels).astype(np.int64)
    return _expand(recon_2d, counts), _expand(zeros_2d, counts)


def quantize_tensor(w: np.ndarray, spec: QuantSpec, clip: ClipRange | None = None,
                    rounding_mask: np.ndarray | None = None, name: str = "") -> PackedTensor:
    """Quantize and bit-pack a 2-d weight tensor.

    ``rounding_mask`` replaces nearest rounding with floor-plus-mask codes
    (mask entries in {0, 1}), as produced by the adaptive rounding optimizer.
    """
    wc = _prepare(w, spec, clip)
    codes, zeros_2d, _, scale_payload = _quantize_arrays(wc, spec, rounding_mask)
    return PackedTensor(
        name=name,
        shape=wc.shape,
        spec=spec,
        codes=pack_bits(codes.reshape(-1), spec.bits),
        zero_points=pack_bits(zeros_2d.reshape(-1), spec.zp_bits),
        scale_payload=scale_payload,
    )


def unpack_tensor(packed: PackedTensor):
    """Decode payload bitstreams back to (codes, scales, zero_points).

    Codes come back in element order (row-major), scales and zero points in
    group order. Offsets in errors refer to the concatenated payload layout
    codes | zero points | scales.
    """
    n = packed.n_elements
    n_groups = packed.n_groups
    spec = packed.spec
    codes = unpack_bits(packed.codes, spec.bits, n, section="codes section", base_offset=0)
    zp_off = len(packed.codes)
    zeros = unpack_bits(packed.zero_points, spec.zp_bits, n_groups,
                        section="zero-point section", base_offset=zp_off)
    scales = _load_scales(packed.scale_payload, n_groups, spec,
                          base_offset=zp_off + len(packed.zero_points))
    return codes, scales, zeros


def dequantize_tensor(packed: PackedTensor) -> np.ndarray:
    """Reconstruct the float32 weight tensor from a packed payload."""
    codes, scales, zeros = unpack_tensor(packed)
    d_out, d_in = packed.shape
    counts = _group_counts(d_in, packed.spec.group_size)
    gpr = len(counts)
    s_elem = _expand(scales.reshape(d_out, gpr), counts)
    z_elem = _expand(zeros.astype(np.float64).reshape(d_out, gpr), counts)
    w = (codes.astype(np.float64).reshape(d_out, d_in) - z_elem) * s_elem
    return w.astype(np.float32)


def quantize_dequantize(w: np.ndarray, spec: QuantSpec, clip: ClipRange | None = None,
                        rounding_mask: np.ndarray | None = None) -> np.ndarray:
    """Round-trip a weight tensor through the codec without bit packing.

    Matches ``dequantize_tensor(quantize_tensor(...))`` exactly, including the
    float16 storage rounding of scales, so training-time simulated weights
    equal the weights a reader of the packed artifact will see.
    """
    wc = _prepare(w, spec, clip)
    codes, zeros_2d, recon_2d, _ = _quantize_arrays(wc, spec, rounding_mask)
    counts = _group_counts(wc.shape[1], spec.group_size)
    s_elem = _expand(recon_2d, counts)
    z_elem = _expand(zeros_2d.astype(np.float64), counts)
    return ((codes.astype(np.float64) - z_elem) * s_elem).astype(np.float32)


def fake_quantize(w: Tensor, spec: QuantSpec, clip: ClipRange | None = None) -> Tensor:
    """Quantize-dequantize with a straight-through gradient.

    The forward value is the codec round-trip of the current weights; the
    backward rule passes gradients unchanged inside the clip range and blocks
    them outside (everything passes when no clip is given).
    """
    out_data = quantize_dequantize(w.data, spec, clip)
    if clip is None:
        mask = None
    else:
        mask = ((w.data >= clip.alpha) & (w.data <= clip.beta)).astype(np.float32)

    def backward_fn(g):
        return (g if mask is None else g * mask,)

    return autodiff.custom_op("fake_quantize", (w,), out_data, backward_fn)


def average_bitwidth(spec: QuantSpec) -> float:
    """Amortized storage bits per weight, metadata included."""
    G = spec.group_size
    bpw = spec.bits + spec.zp_bits / G
    if spec.bilevel:
        bpw += spec.scale_bits / G + (16 + spec.scale_bits) / (G * spec.scale_group)
    else:
        bpw += 16 / G
    return bpw
