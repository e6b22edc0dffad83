"""Cubic scalar volumes, patch partitioning, phantom synthesis, VOL1 file I/O.

A volume is a side-S cube of float32 intensities stored C-contiguously with
axes (z, y, x), so the flat layout runs x fastest. Every public operation
here is pure and returns finite data.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VOL1_MAGIC = b"VOL1"
VOL1_DTYPE_F32 = 0


class VolumeFormatError(ValueError):
    """A VOL1 file failed structural validation."""


@dataclass(frozen=True)
class Volume:
    """Side-S cube of scalars, nominally in [0, 1]."""

    side: int
    data: np.ndarray  # (S, S, S) float32, axes (z, y, x)

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError(f"volume side must be positive, got {self.side}")
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.shape != (self.side,) * 3:
            raise ValueError(
                f"volume data shape {arr.shape} does not match side {self.side}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume data contains non-finite values")
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_flat(cls, side: int, flat: np.ndarray) -> "Volume":
        return cls(side, np.asarray(flat, dtype=np.float32).reshape(side, side, side))

    def flat(self) -> np.ndarray:
        """Voxels in file order (x fastest)."""
        return self.data.reshape(-1)


@dataclass(frozen=True)
class PatchGrid:
    """An (M, M, M) lattice of flattened P³ sub-blocks of a volume."""

    grid_side: int
    patch_len: int
    data: np.ndarray  # (M, M, M, P**3) float32

    def __post_init__(self):
        m, p = self.grid_side, self.patch_len
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.shape != (m, m, m, p**3):
            raise ValueError(f"patch grid shape {arr.shape} inconsistent with M={m}, P={p}")
        object.__setattr__(self, "data", arr)

    @property
    def side(self) -> int:
        return self.grid_side * self.patch_len


def patchify(v: Volume, patch_len: int) -> PatchGrid:
    """Partition a volume into non-overlapping cubic patches of side `patch_len`.

    Cell (a, b, c) holds the flattened sub-block with origin (a*P, b*P, c*P);
    within-patch flattening follows the volume's own row-major layout.
    """
    s, p = v.side, patch_len
    if p <= 0 or s % p != 0:
        raise ValueError(f"patch length P={p} must divide volume side S={s}")
    m = s // p
    blocks = v.data.reshape(m, p, m, p, m, p).transpose(0, 2, 4, 1, 3, 5)
    return PatchGrid(m, p, blocks.reshape(m, m, m, p**3))


def unpatchify(g: PatchGrid) -> Volume:
    """Exact inverse of :func:`patchify`."""
    m, p = g.grid_side, g.patch_len
    blocks = g.data.reshape(m, m, m, p, p, p).transpose(0, 3, 1, 4, 2, 5)
    return Volume(m * p, blocks.reshape(m * p, m * p, m * p))


@dataclass(frozen=True)
class PhantomSpec:
    """Deterministic recipe for a synthetic test volume."""

    seed: int
    side: int
    n_ellipsoids: int = 4
    background_order: int = 2


def _monomials(order: int):
    return [
        (a, b, c)
        for total in range(order + 1)
        for a in range(total + 1)
        for b in range(total - a + 1)
        for c in (total - a - b,)
    ]


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Sum of Gaussian-falloff ellipsoidal blobs over a low-order polynomial
    background, min-max rescaled to [0, 1]. Pure function of the spec."""
    if spec.side < 8:
        raise ValueError(f"phantom side must be >= 8, got {spec.side}")
    if spec.n_ellipsoids < 0 or spec.background_order < 0:
        raise ValueError("n_ellipsoids and background_order must be non-negative")
    s = spec.side
    rng = np.random.default_rng(spec.seed)
    ax = np.linspace(-1.0, 1.0, s)
    zz, yy, xx = np.meshgrid(ax, ax, ax, indexing="ij")

    field = np.zeros((s, s, s), dtype=np.float64)
    for a, b, c in _monomials(spec.background_order):
        coeff = rng.uniform(-0.5, 0.5)
        field += coeff * zz**a * yy**b * xx**c

    for _ in range(spec.n_ellipsoids):
        center = rng.uniform(-0.6, 0.6, size=3)
        radii = rng.uniform(0.15, 0.45, size=3)
        amp = rng.uniform(0.4, 1.0)
        d2 = (
            ((zz - center[0]) / radii[0]) ** 2
            + ((yy - center[1]) / radii[1]) ** 2
            + ((xx - center[2]) / radii[2]) ** 2
        )
        field += amp * np.exp(-4.5 * d2)

    lo, hi = field.min(), field.max()
    if hi - lo < 1e-12:
        field = np.zeros_like(field)
    else:
        field = (field - lo) / (hi - lo)
    return Volume(s, field.astype(np.float32))


def write_volume(v: Volume, path) -> None:
    """Serialize to the VOL1 format (see the project README)."""
    payload = v.flat().astype("<f4").tobytes()
    header = VOL1_MAGIC + struct.pack("<III", v.side, v.side, v.side)
    header += bytes([VOL1_DTYPE_F32])
    Path(path).write_bytes(header + payload)


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < 17 or raw[:4] != VOL1_MAGIC:
        raise VolumeFormatError(f"bad magic in {path!s}: expected {VOL1_MAGIC!r}")
    dx, dy, dz = struct.unpack("<III", raw[4:16])
    dtype_code = raw[16]
    if dtype_code != VOL1_DTYPE_F32:
        raise VolumeFormatError(f"unsupported dtype code {dtype_code} in {path!s}")
    if not (dx == dy == dz):
        raise VolumeFormatError(f"non-cubic dimensions ({dx},{dy},{dz}) in {path!s}")
    expected = dx * dy * dz * 4
    payload = raw[17:]
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload length mismatch in {path!s}: "
            f"expected {expected} bytes for dims ({dx},{dy},{dz}), got {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    return Volume.from_flat(dx, flat)
